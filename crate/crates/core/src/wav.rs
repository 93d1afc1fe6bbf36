//! Multichannel WAV I/O. Output is always 32-bit float; 16/24/32-bit integer
//! input is scaled to `[-1, 1)`.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct WavAudio {
    pub sample_rate: u32,
    /// One vector per channel, all the same length.
    pub channels: Vec<Vec<f64>>,
}

impl WavAudio {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Shape("audio needs at least one channel".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("audio channels differ in length".into()));
        }
        if channels.len() > usize::from(u16::MAX) {
            return Err(Error::Shape("too many channels for a WAV file".into()));
        }
        Ok(Self { sample_rate, channels })
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = WavReader::new(std::io::BufReader::new(file))?;
        let spec = reader.spec();
        let n = usize::from(spec.channels);
        let interleaved: Vec<f64> = match spec.sample_format {
            SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()?,
            SampleFormat::Int => {
                let scale = 2f64.powi(i32::from(spec.bits_per_sample) - 1);
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| f64::from(v) / scale))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        let frames = interleaved.len() / n;
        let mut channels = vec![Vec::with_capacity(frames); n];
        for frame in interleaved.chunks_exact(n) {
            for (c, v) in channels.iter_mut().zip(frame) {
                c.push(*v);
            }
        }
        Self::new(spec.sample_rate, channels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let spec = WavSpec {
            channels: self.channels.len() as u16,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = WavWriter::new(std::io::BufWriter::new(file), spec)?;
        for i in 0..self.len() {
            for c in &self.channels {
                w.write_sample(c[i] as f32)?;
            }
        }
        w.finalize()?;
        Ok(())
    }
}
