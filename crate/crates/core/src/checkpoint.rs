//! Network (and optional CRF-RNN) checkpoints: ASCII header lines followed by f32 blobs.
//!
//! ```text
//! SSEG-CKPT v1
//! net depth=3 base_channels=8 num_labels=3 dropout_p=0.5 dropout_blocks=3
//! t=1200
//! params=<n>
//! <3n f32: weights, ADAM m, ADAM v>
//! rnn labels=3 sigma_alpha=.. sigma_beta=.. sigma_gamma=.. n_unroll=5 truncation=auto steps=12
//! <2L + L*L f32: w1, w2, compat>
//! ```

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::crfrnn::CrfRnnParams;
use crate::dataio::formats::{f32_blob, header_line, push_f32s, read_bytes, write_bytes};
use crate::densecrf::Truncation;
use crate::error::{Error, Result};
use crate::segnet::{NetConfig, NetParams};
use crate::tensorcore::Tensor;

const MAGIC: &str = "SSEG-CKPT v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NetParams<f32>,
    pub rnn: Option<CrfRnnParams<f32>>,
}

fn fields<'a>(line: &'a str, tag: &str, path: &Path, offset: usize) -> Result<HashMap<&'a str, &'a str>> {
    let mut tok = line.split_ascii_whitespace();
    if tok.next() != Some(tag) {
        return Err(Error::format(path, offset as u64, format!("expected `{tag}` line")));
    }
    tok.map(|t| {
        t.split_once('=')
            .ok_or_else(|| Error::format(path, offset as u64, format!("bad field {t:?}")))
    })
    .collect()
}

fn field<T: std::str::FromStr>(map: &HashMap<&str, &str>, key: &str, path: &Path, offset: usize) -> Result<T> {
    map.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, offset as u64, format!("missing or bad `{key}`")))
}

fn single<T: std::str::FromStr>(line: &str, key: &str, path: &Path, offset: usize) -> Result<T> {
    line.strip_prefix(key)
        .and_then(|v| v.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, offset as u64, format!("expected `{key}=<value>`")))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let c = &self.net.config;
        let mut out = format!(
            "{MAGIC}\nnet depth={} base_channels={} num_labels={} dropout_p={} dropout_blocks={}\nt={}\nparams={}\n",
            c.depth,
            c.base_channels,
            c.num_labels,
            c.dropout_p,
            c.dropout_blocks,
            self.net.t,
            self.net.num_scalars()
        )
        .into_bytes();
        for group in [&self.net.tensors, &self.net.m, &self.net.v] {
            push_f32s(&mut out, group.iter().flat_map(|t| t.data().iter().copied()));
        }
        if let Some(r) = &self.rnn {
            out.extend_from_slice(
                format!(
                    "rnn labels={} sigma_alpha={} sigma_beta={} sigma_gamma={} n_unroll={} truncation={} steps={}\n",
                    r.num_labels(),
                    r.sigma_alpha,
                    r.sigma_beta,
                    r.sigma_gamma,
                    r.n_unroll,
                    r.truncation,
                    r.steps
                )
                .as_bytes(),
            );
            push_f32s(&mut out, r.tensors().iter().flat_map(|t| t.data().iter().copied()));
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let (magic, pos) = header_line(bytes, 0, path)?;
        if magic != MAGIC {
            return Err(Error::format(path, 0, "not an SSEG-CKPT v1 file"));
        }
        let (line, next) = header_line(bytes, pos, path)?;
        let f = fields(line, "net", path, pos)?;
        let config = NetConfig {
            depth: field(&f, "depth", path, pos)?,
            base_channels: field(&f, "base_channels", path, pos)?,
            num_labels: field(&f, "num_labels", path, pos)?,
            dropout_p: field(&f, "dropout_p", path, pos)?,
            dropout_blocks: field(&f, "dropout_blocks", path, pos)?,
        };
        config
            .validate()
            .map_err(|e| Error::format(path, pos as u64, e.to_string()))?;
        let pos = next;
        let (line, next) = header_line(bytes, pos, path)?;
        let t: u64 = single(line, "t", path, pos)?;
        let pos = next;
        let (line, next) = header_line(bytes, pos, path)?;
        let n: usize = single(line, "params", path, pos)?;
        let shapes = NetParams::<f32>::shapes(&config);
        let expect: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if n != expect {
            return Err(Error::format(path, pos as u64, format!("params={n} but the net has {expect}")));
        }
        let blob = f32_blob(bytes, next, 3 * n, path)?;
        let mut pos = next + 12 * n;
        let mut groups = blob.chunks_exact(n).map(|g| {
            let mut off = 0;
            shapes
                .iter()
                .map(|s| {
                    let len = s.iter().product::<usize>();
                    off += len;
                    Tensor::new(s, g[off - len..off].to_vec()).expect("shape matches length")
                })
                .collect::<Vec<_>>()
        });
        let (tensors, m, v) = (groups.next().unwrap(), groups.next().unwrap(), groups.next().unwrap());
        let net = NetParams { config, tensors, m, v, t };

        let rnn = if pos < bytes.len() {
            let (line, next) = header_line(bytes, pos, path)?;
            let f = fields(line, "rnn", path, pos)?;
            let l: usize = field(&f, "labels", path, pos)?;
            let trunc = f
                .get("truncation")
                .and_then(|s| Truncation::parse(s))
                .ok_or_else(|| Error::format(path, pos as u64, "missing or bad `truncation`"))?;
            let mut r = CrfRnnParams::<f32>::new(
                l,
                0.0,
                0.0,
                field(&f, "sigma_alpha", path, pos)?,
                field(&f, "sigma_beta", path, pos)?,
                field(&f, "sigma_gamma", path, pos)?,
                field(&f, "n_unroll", path, pos)?,
            )
            .map_err(|e| Error::format(path, pos as u64, e.to_string()))?;
            r.truncation = trunc;
            r.steps = field(&f, "steps", path, pos)?;
            let vals = f32_blob(bytes, next, 2 * l + l * l, path)?;
            r.set_tensors(
                Tensor::new(&[l], vals[..l].to_vec())?,
                Tensor::new(&[l], vals[l..2 * l].to_vec())?,
                Tensor::new(&[l, l], vals[2 * l..].to_vec())?,
            )?;
            pos = next + 4 * vals.len();
            Some(r)
        } else {
            None
        };
        if pos != bytes.len() {
            return Err(Error::format(path, pos as u64, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { net, rnn })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        Self::decode(&read_bytes(path)?, path)
    }

    /// Hex SHA-256 of the encoded checkpoint.
    pub fn hash(&self) -> String {
        Sha256::digest(self.encode()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample(with_rnn: bool) -> Checkpoint {
        let cfg = NetConfig {
            depth: 2,
            base_channels: 3,
            num_labels: 3,
            dropout_p: 0.3,
            dropout_blocks: 1,
        };
        let mut net = NetParams::<f32>::init(cfg, &mut rng::stream(1, "ckpt")).unwrap();
        net.t = 17;
        net.m[0].data_mut()[0] = 0.25;
        net.v[1].data_mut()[0] = 1e-9;
        let rnn = with_rnn.then(|| {
            let mut r = CrfRnnParams::<f32>::for_width(16, 3).unwrap();
            r.compat.data_mut()[1] = 0.7;
            r.truncation = Truncation::Radius(5);
            r.steps = 4;
            r
        });
        Checkpoint { net, rnn }
    }

    #[test]
    fn round_trip_is_exact() {
        for with_rnn in [false, true] {
            let c = sample(with_rnn);
            let back = Checkpoint::decode(&c.encode(), Path::new("mem")).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn hash_tracks_weights() {
        let a = sample(false);
        let mut b = a.clone();
        b.net.tensors[0].data_mut()[0] += 1e-3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = sample(true).encode();
        let p = Path::new("mem");
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3], p), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra, p), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::decode(b"SSEG-CKPT v2\n", p), Err(Error::Format { offset: 0, .. })));
        let text = String::from_utf8_lossy(&bytes).replace("params=", "params=1");
        assert!(Checkpoint::decode(text.as_bytes(), p).is_err());
    }
}
