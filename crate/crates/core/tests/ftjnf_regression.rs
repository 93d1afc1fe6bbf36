//! Fixed-weight regression vectors for the FT-JNF forward pass. The fixture
//! was produced once by `regenerate_fixture` and is compared, not rewritten.

use std::path::PathBuf;

use ambiset_core::enhance::{ft_jnf_forward, FtJnfWeights};
use ambiset_core::stft::{StftConfig, TimeFreqTensor};
use ndarray::Array3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct Fixture {
    channels: usize,
    frames: usize,
    fft_size: usize,
    /// `[channel][frame][bin] = [re, im]`
    input: Vec<Vec<Vec<[f64; 2]>>>,
    /// `[frame][bin] = [re, im]`
    mask: Vec<Vec<[f64; 2]>>,
}

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn config(fft: usize) -> StftConfig {
    StftConfig {
        window_len: fft,
        hop: fft / 2,
        fft_size: fft,
        ..StftConfig::default()
    }
}

fn tensor(f: &Fixture) -> TimeFreqTensor {
    let cfg = config(f.fft_size);
    let data = Array3::from_shape_fn((f.channels, f.frames, cfg.bins()), |(c, t, k)| {
        let [re, im] = f.input[c][t][k];
        Complex64::new(re, im)
    });
    TimeFreqTensor::new(data, cfg).unwrap()
}

#[test]
fn forward_matches_stored_vectors() {
    let weights = FtJnfWeights::load(&dir().join("ftjnf_small.ftjw")).unwrap();
    let text = std::fs::read_to_string(dir().join("ftjnf_small.json")).unwrap();
    let fixture: Fixture = serde_json::from_str(&text).unwrap();
    let mask = ft_jnf_forward(&tensor(&fixture), &weights).unwrap();
    assert_eq!(mask.data().dim(), (fixture.frames, fixture.mask[0].len()));
    for (t, row) in fixture.mask.iter().enumerate() {
        for (k, [re, im]) in row.iter().enumerate() {
            let z = mask.data()[[t, k]];
            assert!((z.re - re).abs() < 1e-12 && (z.im - im).abs() < 1e-12, "frame {t} bin {k}");
        }
    }
}

#[test]
#[ignore = "writes the fixture; run once by hand"]
fn regenerate_fixture() {
    let (channels, frames, fft_size) = (3, 4, 16);
    let weights = FtJnfWeights::random(channels, 6, 5, 2024);
    let cfg = config(fft_size);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input: Vec<Vec<Vec<[f64; 2]>>> = (0..channels)
        .map(|_| {
            (0..frames)
                .map(|_| {
                    (0..cfg.bins())
                        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut fixture = Fixture {
        channels,
        frames,
        fft_size,
        input,
        mask: Vec::new(),
    };
    let mask = ft_jnf_forward(&tensor(&fixture), &weights).unwrap();
    fixture.mask = mask
        .data()
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|z| [z.re, z.im]).collect())
        .collect();
    weights.save(&dir().join("ftjnf_small.ftjw")).unwrap();
    std::fs::write(dir().join("ftjnf_small.json"), serde_json::to_string_pretty(&fixture).unwrap()).unwrap();
}
