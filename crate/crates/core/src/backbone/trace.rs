//! Binary trace files (`.wct`) and an open-loop replay backbone.
//!
//! Layout, all little-endian:
//!
//! | field        | type                                   |
//! |--------------|----------------------------------------|
//! | magic        | `b"WCTRACE1"`                          |
//! | n_tokens     | u32                                    |
//! | dims         | u32                                    |
//! | n_steps      | u32                                    |
//! | timesteps    | `n_steps` x f64, strictly decreasing   |
//! | payload      | `n_steps * n_tokens * dims` x f32      |
//! | modality     | optional: flag byte, then `n_tokens` label bytes if the flag is 1 |
//!
//! The replay backbone returns the stored block for the requested timestep
//! and ignores the latent entirely. A replayed trajectory is whatever the
//! recording model produced in its own loop; it cannot react to cache error.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::matrix::{Modality, Timestep, TokenMatrix};
use crate::pipeline::Backbone;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"WCTRACE1";
const MAGIC_STEM: &[u8; 7] = b"WCTRACE";
pub const HEADER_LEN: usize = 8 + 3 * 4;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic at byte 0: expected \"WCTRACE1\", found {found:?}")]
    BadMagic { found: String },

    #[error("unsupported trace version at byte 7: {found:?}")]
    UnsupportedVersion { found: String },

    #[error("truncated trace at byte {offset}: need {needed} more bytes for {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: &'static str,
    },

    #[error("timestep at byte {offset} is {value}, not below the previous {previous}")]
    NonDecreasingTimestep {
        offset: usize,
        value: f64,
        previous: f64,
    },

    #[error("non-finite value at byte {offset}")]
    NonFinite { offset: usize },

    #[error("bad modality flag {flag} at byte {offset}")]
    BadModalityFlag { offset: usize, flag: u8 },

    #[error("bad modality label {label} at byte {offset}")]
    BadModalityLabel { offset: usize, label: u8 },

    #[error("{count} trailing bytes after byte {offset}")]
    TrailingBytes { offset: usize, count: usize },

    #[error("empty trace: {0}")]
    Empty(&'static str),

    #[error("dimension {what}={value} does not fit the format")]
    TooLarge { what: &'static str, value: usize },
}

/// Parsed contents of a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceData {
    pub n_tokens: usize,
    pub dims: usize,
    pub timesteps: Vec<f64>,
    /// `n_steps` row-major blocks.
    pub payload: Vec<f32>,
    pub modality: Option<Vec<Modality>>,
}

impl TraceData {
    pub fn n_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn block(&self, step: usize) -> &[f32] {
        let len = self.n_tokens * self.dims;
        &self.payload[step * len..(step + 1) * len]
    }
}

fn to_u32(what: &'static str, value: usize) -> Result<u32> {
    u32::try_from(value).map_err(|_| TraceError::TooLarge { what, value }.into())
}

/// Writes `outputs` (narrowed to 32-bit) to `path`.
pub fn write_trace<T: Scalar>(
    path: impl AsRef<Path>,
    outputs: &[(Timestep<T>, TokenMatrix<T>)],
    modality: Option<&[Modality]>,
) -> Result<()> {
    let (first_t, first) = outputs
        .first()
        .ok_or(TraceError::Empty("no outputs to write"))?;
    let shape = first.shape();
    let mut previous = first_t.value.as_f64();
    for (i, (t, y)) in outputs.iter().enumerate() {
        y.ensure_shape(shape)?;
        let v = t.value.as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        if i > 0 && v >= previous {
            return Err(Error::Ordering(format!(
                "timestep {v} at output {i} does not decrease from {previous}"
            )));
        }
        previous = v;
    }
    if let Some(m) = modality {
        if m.len() != shape.0 {
            return Err(Error::length("modality tags", shape.0, m.len()));
        }
    }
    if let Some((i, _)) = outputs
        .iter()
        .flat_map(|(_, y)| y.as_slice())
        .enumerate()
        .find(|(_, v)| !(v.as_f64() as f32).is_finite())
    {
        return Err(Error::NonFinite { index: i });
    }

    let mut w = BufWriter::new(File::create(path).map_err(TraceError::from)?);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(TraceError::from);
    put(MAGIC)?;
    put(&to_u32("n_tokens", shape.0)?.to_le_bytes())?;
    put(&to_u32("dims", shape.1)?.to_le_bytes())?;
    put(&to_u32("n_steps", outputs.len())?.to_le_bytes())?;
    for (t, _) in outputs {
        put(&t.value.as_f64().to_le_bytes())?;
    }
    for (_, y) in outputs {
        for v in y.as_slice() {
            put(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    match modality {
        Some(tags) => {
            put(&[1])?;
            put(&tags.iter().map(|m| m.to_byte()).collect::<Vec<_>>())?;
        }
        None => put(&[0])?,
    }
    w.flush().map_err(TraceError::from)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], TraceError> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(TraceError::Truncated {
                offset: self.bytes.len(),
                needed: n - have,
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<usize, TraceError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses and structurally validates an in-memory trace.
pub fn parse_trace(bytes: &[u8]) -> std::result::Result<TraceData, TraceError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(8, "magic").map_err(|e| match e {
        TraceError::Truncated { .. } if !bytes.starts_with(&MAGIC[..bytes.len().min(8)]) => {
            TraceError::BadMagic {
                found: String::from_utf8_lossy(bytes).into_owned(),
            }
        }
        e => e,
    })?;
    if magic != MAGIC {
        let found = String::from_utf8_lossy(magic).into_owned();
        return Err(if magic.starts_with(MAGIC_STEM) {
            TraceError::UnsupportedVersion { found }
        } else {
            TraceError::BadMagic { found }
        });
    }
    let n_tokens = c.u32("n_tokens")?;
    let dims = c.u32("dims")?;
    let n_steps = c.u32("n_steps")?;
    if n_tokens == 0 || dims == 0 {
        return Err(TraceError::Empty("n_tokens and dims must be positive"));
    }
    if n_steps == 0 {
        return Err(TraceError::Empty("n_steps must be positive"));
    }

    let mut timesteps = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let offset = c.pos;
        let v = f64::from_le_bytes(c.take(8, "timesteps")?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(TraceError::NonFinite { offset });
        }
        if i > 0 && v >= timesteps[i - 1] {
            return Err(TraceError::NonDecreasingTimestep {
                offset,
                value: v,
                previous: timesteps[i - 1],
            });
        }
        timesteps.push(v);
    }

    let count = n_steps
        .checked_mul(n_tokens)
        .and_then(|x| x.checked_mul(dims))
        .ok_or(TraceError::TooLarge {
            what: "payload",
            value: usize::MAX,
        })?;
    let nbytes = count.checked_mul(4).ok_or(TraceError::TooLarge {
        what: "payload",
        value: count,
    })?;
    let start = c.pos;
    let raw = c.take(nbytes, "payload")?;
    let mut payload = Vec::with_capacity(count);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(TraceError::NonFinite {
                offset: start + 4 * i,
            });
        }
        payload.push(v);
    }

    let modality = if c.pos == bytes.len() {
        None
    } else {
        let offset = c.pos;
        match c.take(1, "modality flag")?[0] {
            0 => None,
            1 => {
                let labels_at = c.pos;
                let raw = c.take(n_tokens, "modality labels")?;
                let mut tags = Vec::with_capacity(n_tokens);
                for (i, &b) in raw.iter().enumerate() {
                    tags.push(Modality::from_byte(b).ok_or(TraceError::BadModalityLabel {
                        offset: labels_at + i,
                        label: b,
                    })?);
                }
                Some(tags)
            }
            flag => return Err(TraceError::BadModalityFlag { offset, flag }),
        }
    };
    if c.pos != bytes.len() {
        return Err(TraceError::TrailingBytes {
            offset: c.pos,
            count: bytes.len() - c.pos,
        });
    }
    Ok(TraceData {
        n_tokens,
        dims,
        timesteps,
        payload,
        modality,
    })
}

pub fn read_trace_data(path: impl AsRef<Path>) -> Result<TraceData> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(TraceError::from)?;
    Ok(parse_trace(&bytes)?)
}

/// Opens `path` as a replay backbone.
pub fn read_trace(path: impl AsRef<Path>) -> Result<TraceBackbone> {
    Ok(TraceBackbone::new(read_trace_data(path)?))
}

/// Structural validation only; returns the parsed header on success.
pub fn validate(path: impl AsRef<Path>) -> Result<TraceData> {
    read_trace_data(path)
}

/// Open-loop backbone serving recorded outputs by step index.
#[derive(Debug, Clone)]
pub struct TraceBackbone {
    data: TraceData,
}

impl TraceBackbone {
    pub fn new(data: TraceData) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &TraceData {
        &self.data
    }

    /// Stored block `step` widened to `T`.
    pub fn output<T: Scalar>(&self, step: usize) -> Result<TokenMatrix<T>> {
        if step >= self.data.n_steps() {
            return Err(Error::Parameter(format!(
                "step {step} beyond trace of {} steps",
                self.data.n_steps()
            )));
        }
        let block = self
            .data
            .block(step)
            .iter()
            .map(|&v| T::of(v as f64))
            .collect();
        TokenMatrix::new(self.data.n_tokens, self.data.dims, block)
    }

    /// Scheduler nodes for replay: the recorded timesteps plus a terminal node,
    /// 0 when the last timestep is positive, else one more step of the last spacing.
    pub fn schedule_nodes(&self) -> Vec<f64> {
        let ts = &self.data.timesteps;
        let last = ts[ts.len() - 1];
        let end = if last > 0.0 {
            0.0
        } else if ts.len() >= 2 {
            last - (ts[ts.len() - 2] - last)
        } else {
            last - 1.0
        };
        ts.iter().copied().chain(std::iter::once(end)).collect()
    }
}

impl<T: Scalar> Backbone<T> for TraceBackbone {
    fn shape(&self) -> (usize, usize) {
        (self.data.n_tokens, self.data.dims)
    }

    fn evaluate(&self, z: &TokenMatrix<T>, t: Timestep<T>) -> Result<TokenMatrix<T>> {
        z.ensure_shape((self.data.n_tokens, self.data.dims))?;
        let stored = *self.data.timesteps.get(t.index).ok_or_else(|| {
            Error::Parameter(format!(
                "timestep index {} beyond trace of {} steps",
                t.index,
                self.data.n_steps()
            ))
        })?;
        if T::of(stored) != t.value {
            return Err(Error::Ordering(format!(
                "timestep {} at index {} does not match recorded {stored}",
                t.value, t.index
            )));
        }
        self.output(t.index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_outputs(
        seed: u64,
        n: usize,
        d: usize,
        steps: usize,
    ) -> Vec<(Timestep<f64>, TokenMatrix<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..steps)
            .map(|i| {
                let y = TokenMatrix::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0)).unwrap();
                (Timestep::new((steps - i) as f64 * 0.5, i), y)
            })
            .collect()
    }

    fn write_bytes(
        outputs: &[(Timestep<f64>, TokenMatrix<f64>)],
        modality: Option<&[Modality]>,
    ) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wct");
        write_trace(&p, outputs, modality).unwrap();
        std::fs::read(p).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let outputs = random_outputs(1, 4, 3, 5);
        let bytes = write_bytes(&outputs, None);
        assert_eq!(bytes.len(), HEADER_LEN + 5 * 8 + 4 * 3 * 5 * 4 + 1);
        let data = parse_trace(&bytes).unwrap();
        assert_eq!((data.n_tokens, data.dims, data.n_steps()), (4, 3, 5));
        let expect: Vec<f32> = outputs
            .iter()
            .flat_map(|(_, y)| y.as_slice().iter().map(|&v| v as f32))
            .collect();
        assert_eq!(
            data.payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            expect.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            data.timesteps,
            outputs.iter().map(|(t, _)| t.value).collect::<Vec<_>>()
        );
        assert_eq!(data.modality, None);
    }

    #[test]
    fn modality_round_trip() {
        let outputs = random_outputs(2, 3, 2, 2);
        let tags = [Modality::Rgb, Modality::Depth, Modality::Other];
        let data = parse_trace(&write_bytes(&outputs, Some(&tags))).unwrap();
        assert_eq!(data.modality.as_deref(), Some(&tags[..]));
    }

    #[test]
    fn missing_modality_section_is_accepted() {
        let outputs = random_outputs(3, 2, 2, 2);
        let mut bytes = write_bytes(&outputs, None);
        bytes.pop();
        assert!(parse_trace(&bytes).unwrap().modality.is_none());
    }

    #[test]
    fn format_violations_are_distinct() {
        let bytes = write_bytes(&random_outputs(4, 4, 3, 5), None);

        let mut v0 = bytes.clone();
        v0[7] = b'0';
        assert!(matches!(
            parse_trace(&v0),
            Err(TraceError::UnsupportedVersion { .. })
        ));

        let mut junk = bytes.clone();
        junk[..8].copy_from_slice(b"NOTATRCE");
        assert!(matches!(
            parse_trace(&junk),
            Err(TraceError::BadMagic { .. })
        ));

        let cut = &bytes[..bytes.len() - 10];
        match parse_trace(cut) {
            Err(TraceError::Truncated { offset, what, .. }) => {
                assert_eq!(offset, cut.len());
                assert_eq!(what, "payload");
            }
            other => panic!("expected truncation, got {other:?}"),
        }

        let mut flat = bytes.clone();
        let second = HEADER_LEN + 8;
        flat[second..second + 8].copy_from_slice(&2.5f64.to_le_bytes());
        match parse_trace(&flat) {
            Err(TraceError::NonDecreasingTimestep { offset, .. }) => assert_eq!(offset, second),
            other => panic!("expected ordering error, got {other:?}"),
        }

        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0]);
        assert!(matches!(
            parse_trace(&extra),
            Err(TraceError::BadModalityFlag { .. }) | Err(TraceError::TrailingBytes { .. })
        ));

        let mut flag = bytes.clone();
        *flag.last_mut().unwrap() = 7;
        assert!(matches!(
            parse_trace(&flag),
            Err(TraceError::BadModalityFlag { flag: 7, .. })
        ));

        let mut nan = bytes;
        let at = HEADER_LEN + 5 * 8 + 4;
        nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(parse_trace(&nan), Err(TraceError::NonFinite { offset }) if offset == at));
    }

    #[test]
    fn short_header_reports_truncation() {
        assert!(matches!(
            parse_trace(b"WCTR"),
            Err(TraceError::Truncated { .. })
        ));
        assert!(matches!(
            parse_trace(b"XYZ"),
            Err(TraceError::BadMagic { .. })
        ));
        assert!(matches!(
            parse_trace(b"WCTRACE1\x01\x00"),
            Err(TraceError::Truncated {
                what: "n_tokens",
                ..
            })
        ));
    }

    #[test]
    fn replay_serves_rows_and_ignores_latent() {
        let outputs = random_outputs(5, 4, 3, 5);
        let data = parse_trace(&write_bytes(&outputs, None)).unwrap();
        let b = TraceBackbone::new(data);
        let z0 = TokenMatrix::<f64>::zeros(4, 3).unwrap();
        let z1 = TokenMatrix::from_fn(4, 3, |r, c| (r + c) as f64).unwrap();
        for (t, y) in &outputs {
            let a = b.evaluate(&z0, *t).unwrap();
            assert_eq!(a, b.evaluate(&z1, *t).unwrap());
            for (got, want) in a.as_slice().iter().zip(y.as_slice()) {
                assert_eq!(*got, *want as f32 as f64);
            }
        }
        assert!(b.evaluate(&z0, Timestep::new(1.25, 1)).is_err());
        assert!(b.evaluate(&z0, Timestep::new(0.0, 9)).is_err());
        assert_eq!(b.schedule_nodes(), vec![2.5, 2.0, 1.5, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn writer_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.wct");
        let mut outputs = random_outputs(6, 2, 2, 3);
        assert!(write_trace::<f64>(&p, &[], None).is_err());
        outputs[1].0 = Timestep::new(10.0, 1);
        assert!(matches!(
            write_trace(&p, &outputs, None),
            Err(Error::Ordering(_))
        ));
        let outputs = random_outputs(6, 2, 2, 3);
        assert!(write_trace(&p, &outputs, Some(&[Modality::Rgb])).is_err());
    }
}
