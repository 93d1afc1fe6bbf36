//! End-to-end workflows behind the command-line verbs: scene bundles,
//! filter design, encoding, enhancement and evaluation.

use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::asm::{
    asm_apply, asm_design, asm_nmse_table, check_encodability, design_for_array, spatial_aliasing_frequency,
    AsmDesignParams, AsmFilterBank, Encodability, ALIGNMENT_TOLERANCE_HZ,
};
use crate::dsp::detect_onset;
use crate::enhance::{
    apply_mask, channel_dropout, DropoutSpec, FtJnfWeights, MaskEstimator, DEFAULT_MASK_CLIP,
};
use crate::error::{Error, Result};
use crate::geometry::{builtin_array, full_set, horizontal_subset, ArrayGeometry, HarmonicIndex, HarmonicSet};
use crate::metrics::{aggregate, si_sdr, EvalReport, EvalRow};
use crate::room::{
    add_sensor_noise, random_layout, render_ideal_ambisonics, render_mics, scene_rng, LayoutRules, NoiseLevel,
    RoomSpec, SceneSpec, AMBI_NOISE_STREAM, DEFAULT_DIMENSIONS, DEFAULT_MAX_ORDER, DEFAULT_RT60, MIC_NOISE_STREAM,
};
use crate::sh::{pack_spectra, DirectionGrid};
use crate::steering::{FrequencyGrid, SteeringMatrix, DEFAULT_SPEED_OF_SOUND};
use crate::stft::{stft_forward, stft_inverse, StftConfig, TimeFreqTensor};
use crate::synth::{synthetic_speech, SynthSpeechParams};
use crate::wav::WavAudio;

/// RNG stream of the scene layout.
pub const LAYOUT_STREAM: u64 = 0;

/// Onset detector window (seconds) and RMS fraction of the peak window.
pub const ONSET_WINDOW_SECONDS: f64 = 0.010;
pub const ONSET_FRACTION: f64 = 0.01;

/// Silence appended to every source so propagation delays stay inside the render.
pub const RENDER_MARGIN_SECONDS: f64 = 0.1;

/// Lowest frequency of the NMSE summary band.
pub const SUMMARY_LOW_HZ: f64 = 90.0;

pub const MIC_FILE: &str = "mic.wav";
pub const AMBISONICS_FILE: &str = "ambisonics.wav";
pub const CLEAN_MIC_FILE: &str = "clean_mic.wav";
pub const CLEAN_AMB_FILE: &str = "clean_amb.wav";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetKind {
    /// `m = ±n` harmonics only, `2N + 1` channels.
    #[default]
    Horizontal,
    /// All harmonics, `(N + 1)²` channels.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonicConfig {
    pub order: u32,
    pub subset: SubsetKind,
}

impl Default for HarmonicConfig {
    fn default() -> Self {
        Self {
            order: 2,
            subset: SubsetKind::Horizontal,
        }
    }
}

impl HarmonicConfig {
    pub fn set(&self) -> Result<HarmonicSet> {
        if self.order > crate::sh::MAX_ORDER {
            return Err(Error::UnsupportedOrder(self.order));
        }
        Ok(match self.subset {
            SubsetKind::Horizontal => horizontal_subset(self.order),
            SubsetKind::Full => full_set(self.order),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DesignGrid {
    /// Equally spaced azimuths on the horizon (planar arrays).
    Horizontal { count: usize },
    /// Gauss–Legendre sphere grid.
    Sphere { n_theta: usize, n_phi: usize },
}

impl Default for DesignGrid {
    fn default() -> Self {
        DesignGrid::Horizontal { count: 360 }
    }
}

impl DesignGrid {
    pub fn build(&self) -> Result<DirectionGrid> {
        match *self {
            DesignGrid::Horizontal { count } if count > 0 => Ok(DirectionGrid::horizontal(count)),
            DesignGrid::Sphere { n_theta, n_phi } if n_theta > 0 && n_phi > 0 => {
                Ok(DirectionGrid::gauss_sphere(n_theta, n_phi))
            }
            _ => Err(Error::Validation("design grid needs at least one direction".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsmConfig {
    pub harmonics: HarmonicConfig,
    pub grid: DesignGrid,
    /// Design SNR in dB, independent of the scene SNR.
    pub snr_db: f64,
    pub speed_of_sound: f64,
}

impl Default for AsmConfig {
    fn default() -> Self {
        Self {
            harmonics: HarmonicConfig::default(),
            grid: DesignGrid::default(),
            snr_db: 30.0,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoomConfig {
    pub dimensions: [f64; 3],
    pub rt60: f64,
    pub max_order: u32,
}

impl Default for RoomConfig {
    fn default() -> Self {
        Self {
            dimensions: DEFAULT_DIMENSIONS,
            rt60: DEFAULT_RT60,
            max_order: DEFAULT_MAX_ORDER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// One file per speaker slot, target first. Empty means synthetic speech.
    pub speech: Vec<PathBuf>,
    pub synthetic: bool,
    pub speakers: usize,
    pub segment_seconds: f64,
    pub sample_rate: u32,
    pub room: RoomConfig,
    /// Catalog name or path to an array JSON file.
    pub array: String,
    pub harmonics: HarmonicConfig,
    pub snr_db: f64,
    pub speed_of_sound: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            speech: Vec::new(),
            synthetic: false,
            speakers: 6,
            segment_seconds: 6.0,
            sample_rate: 16_000,
            room: RoomConfig::default(),
            array: "full_circle_r10".into(),
            harmonics: HarmonicConfig::default(),
            snr_db: 30.0,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    Unit,
    Oracle,
    FtJnf,
}

/// Everything the verbs read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub scene: SceneConfig,
    pub asm: AsmConfig,
    pub stft: StftConfig,
    pub dropout: Option<DropoutSpec>,
    pub estimator: EstimatorKind,
    pub mask_clip: Option<f64>,
    pub seed: Option<u64>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Built-in catalog name, or a path to an array JSON file.
pub fn resolve_array(spec: &str) -> Result<ArrayGeometry> {
    let path = Path::new(spec);
    if path.is_file() {
        ArrayGeometry::from_json_file(path)
    } else {
        builtin_array(spec)
    }
}

fn ensure_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

fn onset_window(fs: f64) -> usize {
    (ONSET_WINDOW_SECONDS * fs).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleFiles {
    pub mic: String,
    pub ambisonics: String,
    pub clean_mic: String,
    pub clean_amb: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub seed: u64,
    pub config: SceneConfig,
    pub scene: SceneSpec,
    pub harmonics: HarmonicSet,
    pub reference_mic: usize,
    /// Channel of `a_00` in the Ambisonics file.
    pub ambisonics_reference_channel: usize,
    /// Onset of each source file, in samples.
    pub source_onsets: Vec<usize>,
    /// Start of the segment in the rendered signals, in samples.
    pub segment_start: usize,
    pub segment_samples: usize,
    pub files: BundleFiles,
}

/// A generated scene held in memory.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub mic: WavAudio,
    pub ambisonics: WavAudio,
    /// Direct-path target at the reference mic.
    pub clean_mic: WavAudio,
    /// Direct-path target `a_00`.
    pub clean_amb: WavAudio,
    pub manifest: SceneManifest,
}

fn load_sources(cfg: &SceneConfig, seed: u64, seg_len: usize) -> Result<Vec<Vec<f64>>> {
    let fs = f64::from(cfg.sample_rate);
    if cfg.speech.is_empty() {
        if !cfg.synthetic {
            return Err(Error::Validation(
                "no speech files given; list them or enable synthetic speech".into(),
            ));
        }
        let params = SynthSpeechParams {
            sample_rate: fs,
            duration: cfg.segment_seconds + 1.0,
            ..SynthSpeechParams::default()
        };
        return Ok((0..cfg.speakers as u64)
            .map(|slot| synthetic_speech(seed, slot, &params))
            .collect());
    }
    if cfg.speech.len() < cfg.speakers {
        return Err(Error::Validation(format!(
            "{} speakers requested with {} speech files",
            cfg.speakers,
            cfg.speech.len()
        )));
    }
    cfg.speech[..cfg.speakers]
        .iter()
        .map(|p| {
            ensure_file(p)?;
            let audio = WavAudio::read(p)?;
            if audio.sample_rate != cfg.sample_rate {
                return Err(Error::Validation(format!(
                    "{}: sample rate {} Hz, expected {} Hz",
                    p.display(),
                    audio.sample_rate,
                    cfg.sample_rate
                )));
            }
            if audio.channel_count() > 1 {
                warn!("{}: using the first of {} channels", p.display(), audio.channel_count());
            }
            let x = audio.channels.into_iter().next().unwrap_or_default();
            if x.len() < seg_len {
                return Err(Error::Validation(format!(
                    "{}: {} samples, shorter than the {seg_len}-sample segment",
                    p.display(),
                    x.len()
                )));
            }
            Ok(x)
        })
        .collect()
}

/// Renders one scene: seeded layout, mic and ideal Ambisonics signals cut to
/// a segment that starts at the clean-reference onset, then sensor noise.
pub fn build_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneBundle> {
    if cfg.speakers == 0 {
        return Err(Error::Validation("at least one speaker is required".into()));
    }
    if !(cfg.segment_seconds > 0.0) || cfg.sample_rate == 0 {
        return Err(Error::Validation("segment length and sample rate must be positive".into()));
    }
    if !cfg.snr_db.is_finite() {
        return Err(Error::Validation("scene snr must be finite".into()));
    }
    let fs = f64::from(cfg.sample_rate);
    let seg_len = (cfg.segment_seconds * fs).round() as usize;
    let margin = (RENDER_MARGIN_SECONDS * fs).round() as usize;
    let window = onset_window(fs);
    let set = cfg.harmonics.set()?;
    let omni = set
        .omni_channel()
        .ok_or_else(|| Error::Validation("harmonic set lacks a_00".into()))?;
    let array = resolve_array(&cfg.array)?;
    let room = RoomSpec::from_rt60(cfg.room.dimensions, cfg.room.rt60, cfg.room.max_order)?;

    let raw = load_sources(cfg, seed, seg_len)?;
    let mut onsets = Vec::with_capacity(raw.len());
    let mut signals = Vec::with_capacity(raw.len());
    for (i, x) in raw.iter().enumerate() {
        let on = detect_onset(x, window, ONSET_FRACTION)
            .ok_or_else(|| Error::Validation(format!("speech for speaker {i} is silent")))?;
        if x.len() - on < seg_len {
            return Err(Error::Validation(format!(
                "speech for speaker {i} has {} samples after its onset, shorter than the {seg_len}-sample segment",
                x.len() - on
            )));
        }
        let mut s = x[on..on + seg_len].to_vec();
        s.resize(seg_len + margin, 0.0);
        onsets.push(on);
        signals.push(s);
    }

    let mut rng = scene_rng(seed, LAYOUT_STREAM);
    let (center, azimuth, sources) =
        random_layout(&room, &array, cfg.speakers, &LayoutRules::default(), &mut rng)?;
    let mut scene = SceneSpec {
        room,
        sources,
        signals,
        array,
        array_center: center,
        array_azimuth: azimuth,
        snr_db: None,
        sample_rate: fs,
        speed_of_sound: cfg.speed_of_sound,
        seed,
    };
    let mic = render_mics(&scene)?;
    let amb = render_ideal_ambisonics(&scene, &set)?;

    // the a_00 direct path is the enhancement target, so the segment starts at its onset
    let start = detect_onset(&amb.clean_a00, window, ONSET_FRACTION)
        .ok_or_else(|| Error::Validation("rendered target is silent".into()))?;
    if start + seg_len > mic.clean.len() {
        return Err(Error::Geometry(format!(
            "target onset at {start} samples leaves less than one segment"
        )));
    }
    let cut = |x: &[f64]| x[start..start + seg_len].to_vec();
    let mut mic_sig: Vec<Vec<f64>> = mic.signals.iter().map(|x| cut(x)).collect();
    let mut amb_sig: Vec<Vec<f64>> = amb.signals.iter().map(|x| cut(x)).collect();
    add_sensor_noise(
        &mut mic_sig,
        cfg.snr_db,
        NoiseLevel::Reference(mic.reference_mic),
        &mut scene_rng(seed, MIC_NOISE_STREAM),
    );
    add_sensor_noise(
        &mut amb_sig,
        cfg.snr_db,
        NoiseLevel::PerChannel,
        &mut scene_rng(seed, AMBI_NOISE_STREAM),
    );
    scene.snr_db = Some(cfg.snr_db);

    let manifest = SceneManifest {
        seed,
        config: cfg.clone(),
        scene,
        harmonics: set,
        reference_mic: mic.reference_mic,
        ambisonics_reference_channel: omni,
        source_onsets: onsets,
        segment_start: start,
        segment_samples: seg_len,
        files: BundleFiles {
            mic: MIC_FILE.into(),
            ambisonics: AMBISONICS_FILE.into(),
            clean_mic: CLEAN_MIC_FILE.into(),
            clean_amb: CLEAN_AMB_FILE.into(),
        },
    };
    let sr = cfg.sample_rate;
    Ok(SceneBundle {
        mic: WavAudio::new(sr, mic_sig)?,
        ambisonics: WavAudio::new(sr, amb_sig)?,
        clean_mic: WavAudio::new(sr, vec![cut(&mic.clean)])?,
        clean_amb: WavAudio::new(sr, vec![cut(&amb.clean_a00)])?,
        manifest,
    })
}

pub fn write_bundle(bundle: &SceneBundle, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let f = &bundle.manifest.files;
    bundle.mic.write(&out_dir.join(&f.mic))?;
    bundle.ambisonics.write(&out_dir.join(&f.ambisonics))?;
    bundle.clean_mic.write(&out_dir.join(&f.clean_mic))?;
    bundle.clean_amb.write(&out_dir.join(&f.clean_amb))?;
    let path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&bundle.manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// `scene-generate`: builds the scene and writes the bundle to `out_dir`.
pub fn cmd_scene_generate(cfg: &SceneConfig, seed: u64, out_dir: &Path) -> Result<SceneManifest> {
    let bundle = build_scene(cfg, seed)?;
    write_bundle(&bundle, out_dir)?;
    info!("scene written to {}", out_dir.display());
    Ok(bundle.manifest)
}

/// Mean NMSE of one designed channel over all bins and over the band below aliasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseSummaryRow {
    pub harmonic: HarmonicIndex,
    pub mean_db: f64,
    pub below_alias_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DesignOutcome {
    pub steering: SteeringMatrix,
    pub bank: AsmFilterBank,
    /// Upper edge of the summary band; unknown for measured steering without geometry.
    pub alias_hz: Option<f64>,
    pub summary: Vec<NmseSummaryRow>,
}

fn mean_db(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| 10.0 * (sum / n as f64).log10())
}

fn design_summary(steering: SteeringMatrix, bank: AsmFilterBank, alias_hz: Option<f64>) -> Result<DesignOutcome> {
    let table = asm_nmse_table(&steering, &bank)?;
    let f = steering.freqs().frequencies().to_vec();
    let summary = bank
        .harmonic_set()
        .indices()
        .iter()
        .enumerate()
        .map(|(c, h)| NmseSummaryRow {
            harmonic: *h,
            mean_db: mean_db(table.column(c).iter().copied()).unwrap_or(f64::NAN),
            below_alias_db: alias_hz.and_then(|hi| {
                mean_db(
                    table
                        .column(c)
                        .iter()
                        .zip(&f)
                        .filter(|(_, &fr)| (SUMMARY_LOW_HZ..=hi).contains(&fr))
                        .map(|(v, _)| *v),
                )
            }),
        })
        .collect();
    Ok(DesignOutcome {
        steering,
        bank,
        alias_hz,
        summary,
    })
}

fn warn_encodability(set: &HarmonicSet, mics: usize) {
    if let Encodability::Warn { channels, mics } = check_encodability(set, mics) {
        warn!("{channels} Ambisonics channels from {mics} microphones; some channels will be poorly encoded");
    }
}

/// `asm-design`: free-field design on the STFT bin grid plus an NMSE summary.
pub fn cmd_asm_design(array: &ArrayGeometry, asm: &AsmConfig, stft: &StftConfig) -> Result<DesignOutcome> {
    stft.validate()?;
    let set = asm.harmonics.set()?;
    warn_encodability(&set, array.len());
    let grid = asm.grid.build()?;
    let freqs = FrequencyGrid::dft_bins(stft.fft_size, stft.sample_rate, asm.speed_of_sound)?;
    let (steering, bank) = design_for_array(array, &set, &grid, &freqs, asm.snr_db)?;
    let alias = spatial_aliasing_frequency(array, set.max_order(), asm.speed_of_sound);
    design_summary(steering, bank, Some(alias))
}

/// `asm-design` from an imported steering matrix, resampled to the STFT bins
/// when its frequencies differ. The design grid is the steering grid.
pub fn cmd_asm_design_measured(steering: &SteeringMatrix, asm: &AsmConfig, stft: &StftConfig) -> Result<DesignOutcome> {
    stft.validate()?;
    let set = asm.harmonics.set()?;
    warn_encodability(&set, steering.mic_count());
    let bins = FrequencyGrid::dft_bins(stft.fft_size, stft.sample_rate, steering.freqs().speed_of_sound())?;
    let v = if steering.freqs().aligned_with(&bins, ALIGNMENT_TOLERANCE_HZ) {
        steering.clone()
    } else {
        info!("resampling steering from {} to {} frequencies", steering.freqs().len(), bins.len());
        steering.resample(&bins)?
    };
    let params = AsmDesignParams {
        harmonic_set: set.clone(),
        grid: v.grid().clone(),
        freqs: v.freqs().clone(),
        snr_db: asm.snr_db,
    };
    let bank = asm_design(&v, &params)?;
    let alias = v
        .array()
        .map(|a| spatial_aliasing_frequency(a, set.max_order(), v.freqs().speed_of_sound()));
    design_summary(v, bank, alias)
}

pub fn format_nmse_summary(outcome: &DesignOutcome) -> String {
    let band = match outcome.alias_hz {
        Some(hi) => format!("{SUMMARY_LOW_HZ:.0}-{hi:.0} Hz NMSE dB"),
        None => "band NMSE dB".to_string(),
    };
    let mut s = format!("{:<10} {:>14} {:>24}\n", "harmonic", "mean NMSE dB", band);
    for row in &outcome.summary {
        let band = row.below_alias_db.map_or("-".to_string(), |v| format!("{v:.2}"));
        s.push_str(&format!(
            "{:<10} {:>14.2} {:>24}\n",
            row.harmonic.to_string(),
            row.mean_db,
            band
        ));
    }
    s
}

fn stft_for(audio: &WavAudio, stft: &StftConfig) -> Result<TimeFreqTensor> {
    stft.validate()?;
    if f64::from(audio.sample_rate) != stft.sample_rate {
        return Err(Error::Validation(format!(
            "audio at {} Hz, STFT configured for {} Hz",
            audio.sample_rate, stft.sample_rate
        )));
    }
    stft_forward(&audio.channels, stft)
}

/// Packed Ambisonics spectra from microphone signals through the filter bank.
pub fn asm_encode_tf(mic: &WavAudio, bank: &AsmFilterBank, stft: &StftConfig) -> Result<TimeFreqTensor> {
    if mic.channel_count() != bank.mic_count() {
        return Err(Error::Shape(format!(
            "{} input channels, filter bank expects {} microphones",
            mic.channel_count(),
            bank.mic_count()
        )));
    }
    let tf = stft_for(mic, stft)?;
    let amb = asm_apply(bank, &tf)?;
    let packed: Array3<_> = pack_spectra(bank.harmonic_set(), amb.data())?;
    TimeFreqTensor::new(packed, *stft)
}

fn time_signals(tf: &TimeFreqTensor, len: usize) -> Result<Vec<Vec<f64>>> {
    Ok(stft_inverse(tf)?
        .into_iter()
        .map(|mut x| {
            x.truncate(len);
            x
        })
        .collect())
}

/// `encode`: microphone WAV to packed Ambisonics WAV of the same length.
pub fn cmd_encode(mic: &WavAudio, bank: &AsmFilterBank, stft: &StftConfig) -> Result<WavAudio> {
    let tf = asm_encode_tf(mic, bank, stft)?;
    WavAudio::new(mic.sample_rate, time_signals(&tf, mic.len())?)
}

/// Where the enhancement input comes from.
#[derive(Debug, Clone)]
pub enum InputPath {
    /// The input already holds packed Ambisonics channels of this set.
    Ideal(HarmonicSet),
    /// The input holds microphone signals, encoded with this bank.
    Asm(AsmFilterBank),
}

impl InputPath {
    pub fn harmonic_set(&self) -> &HarmonicSet {
        match self {
            InputPath::Ideal(s) => s,
            InputPath::Asm(b) => b.harmonic_set(),
        }
    }

    /// Packed Ambisonics spectra of the input.
    pub fn ambisonics_tf(&self, input: &WavAudio, stft: &StftConfig) -> Result<TimeFreqTensor> {
        match self {
            InputPath::Ideal(set) => {
                if input.channel_count() != set.len() {
                    return Err(Error::Shape(format!(
                        "{} input channels, the harmonic set has {}",
                        input.channel_count(),
                        set.len()
                    )));
                }
                stft_for(input, stft)
            }
            InputPath::Asm(bank) => asm_encode_tf(input, bank, stft),
        }
    }
}

#[derive(Debug, Clone)]
pub enum EstimatorChoice {
    Unit,
    /// Needs the clean reference (mono, same length as the input).
    Oracle(WavAudio),
    FtJnf(Box<FtJnfWeights>),
}

#[derive(Debug, Clone)]
pub struct EnhanceRequest {
    pub path: InputPath,
    pub estimator: EstimatorChoice,
    pub stft: StftConfig,
    /// Training-chain dropout; `None` for inference.
    pub dropout: Option<DropoutSpec>,
    pub mask_clip: f64,
}

impl EnhanceRequest {
    pub fn new(path: InputPath, estimator: EstimatorChoice) -> Self {
        Self {
            path,
            estimator,
            stft: StftConfig::default(),
            dropout: None,
            mask_clip: DEFAULT_MASK_CLIP,
        }
    }
}

/// Optional dropout, mask estimation on the (possibly dropped) tensor, mask
/// applied to the reference channel, inverse STFT.
pub fn enhancement_chain(
    tf: &TimeFreqTensor,
    dropout: Option<&DropoutSpec>,
    estimator: &MaskEstimator,
    ref_channel: usize,
) -> Result<Vec<f64>> {
    let dropped;
    let x = match dropout {
        Some(spec) => {
            dropped = channel_dropout(tf, spec)?;
            &dropped
        }
        None => tf,
    };
    let mask = estimator.estimate(x, ref_channel)?;
    let est = apply_mask(&mask, x, ref_channel)?;
    Ok(stft_inverse(&est)?.swap_remove(0))
}

/// `enhance`: single-channel enhanced signal of the same length as the input.
pub fn cmd_enhance(input: &WavAudio, req: &EnhanceRequest) -> Result<WavAudio> {
    let set = req.path.harmonic_set();
    let ref_channel = set
        .omni_channel()
        .ok_or_else(|| Error::Validation("harmonic set lacks a_00, the reference channel".into()))?;
    let tf = req.path.ambisonics_tf(input, &req.stft)?;
    let estimator = match &req.estimator {
        EstimatorChoice::Unit => MaskEstimator::Unit,
        EstimatorChoice::Oracle(clean) => {
            if clean.len() != input.len() {
                return Err(Error::Shape(format!(
                    "clean reference has {} samples, input has {}",
                    clean.len(),
                    input.len()
                )));
            }
            if clean.channel_count() != 1 {
                return Err(Error::Shape("clean reference must be single channel".into()));
            }
            MaskEstimator::Oracle {
                clean: stft_for(clean, &req.stft)?,
                clip: req.mask_clip,
            }
        }
        EstimatorChoice::FtJnf(w) => {
            if w.channels != tf.channels() {
                return Err(Error::Shape(format!(
                    "network expects {} channels, input has {}",
                    w.channels,
                    tf.channels()
                )));
            }
            MaskEstimator::FtJnf(w.clone())
        }
    };
    let mut y = enhancement_chain(&tf, req.dropout.as_ref(), &estimator, ref_channel)?;
    y.truncate(input.len());
    WavAudio::new(input.sample_rate, vec![y])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub dataset: String,
    pub array: String,
    pub method: String,
    pub utterance: String,
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub enhanced: PathBuf,
    /// Channel of the noisy file used as the unprocessed reference.
    #[serde(default)]
    pub noisy_channel: usize,
    #[serde(default)]
    pub noisy_pesq: Option<f64>,
    #[serde(default)]
    pub enhanced_pesq: Option<f64>,
    #[serde(default)]
    pub noisy_stoi: Option<f64>,
    #[serde(default)]
    pub enhanced_stoi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub rows: Vec<EvalEntry>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// Utterance and reason for every skipped row.
    pub skipped: Vec<(String, String)>,
}

fn channel(path: &Path, index: usize) -> Result<Vec<f64>> {
    ensure_file(path)?;
    let mut a = WavAudio::read(path)?;
    if index >= a.channel_count() {
        return Err(Error::Shape(format!(
            "{}: channel {index} requested, file has {}",
            path.display(),
            a.channel_count()
        )));
    }
    Ok(a.channels.swap_remove(index))
}

/// `eval`: SI-SDR of the noisy and enhanced signals of every row. Paths are
/// relative to `base`. Rows with mismatched lengths are skipped with a warning.
pub fn cmd_eval(manifest: &EvalManifest, base: &Path) -> Result<EvalOutcome> {
    if manifest.rows.is_empty() {
        return Err(Error::Validation("evaluation manifest has no rows".into()));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for e in &manifest.rows {
        let clean = channel(&base.join(&e.clean), 0)?;
        let noisy = channel(&base.join(&e.noisy), e.noisy_channel)?;
        let enhanced = channel(&base.join(&e.enhanced), 0)?;
        if noisy.len() != clean.len() || enhanced.len() != clean.len() {
            let why = format!(
                "length mismatch: clean {}, noisy {}, enhanced {}",
                clean.len(),
                noisy.len(),
                enhanced.len()
            );
            warn!("skipping `{}`: {why}", e.utterance);
            skipped.push((e.utterance.clone(), why));
            continue;
        }
        rows.push(EvalRow {
            dataset: e.dataset.clone(),
            array: e.array.clone(),
            method: e.method.clone(),
            utterance: e.utterance.clone(),
            noisy_si_sdr: si_sdr(&clean, &noisy)?.value,
            enhanced_si_sdr: si_sdr(&clean, &enhanced)?.value,
            noisy_pesq: e.noisy_pesq,
            enhanced_pesq: e.enhanced_pesq,
            noisy_stoi: e.noisy_stoi,
            enhanced_stoi: e.enhanced_stoi,
        });
    }
    if rows.is_empty() {
        return Err(Error::Validation(format!(
            "all {} rows were skipped",
            manifest.rows.len()
        )));
    }
    Ok(EvalOutcome {
        report: aggregate(rows)?,
        skipped,
    })
}

pub fn load_eval_manifest(path: &Path) -> Result<EvalManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
