//! Weight file: a text header with the network spec, the flat parameter and
//! buffer vectors one value per line (shortest round-trip decimal), and a
//! SHA-256 of everything above the checksum line.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Network, NetworkSpec, OutputActivation};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "CRCNET";
pub const FORMAT_VERSION: u32 = 1;

fn join(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

pub fn to_string(net: &Network) -> String {
    let s = &net.spec;
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT_TAG} {FORMAT_VERSION}");
    let _ = writeln!(out, "input_dim {}", s.input_dim);
    let _ = writeln!(out, "output_dim {}", s.output_dim);
    let _ = writeln!(out, "n_main_layers {}", s.n_main_layers);
    let _ = writeln!(out, "width {}", s.width);
    let _ = writeln!(out, "residual {}", s.residual);
    let _ = writeln!(out, "batch_norm {}", s.batch_norm);
    match &s.output {
        OutputActivation::Linear => {
            let _ = writeln!(out, "output linear");
        }
        OutputActivation::StretchedSigmoid { lo, hi } => {
            let _ = writeln!(out, "output stretched_sigmoid");
            let _ = writeln!(out, "lo {}", join(lo.iter().copied()));
            let _ = writeln!(out, "hi {}", join(hi.iter().copied()));
        }
    }
    let _ = writeln!(out, "input_box {}", join(s.input_box.iter().flatten().copied()));
    let _ = writeln!(out, "params {}", net.params.len());
    for v in &net.params {
        let _ = writeln!(out, "{v:e}");
    }
    let _ = writeln!(out, "buffers {}", net.buffers.len());
    for v in &net.buffers {
        let _ = writeln!(out, "{v:e}");
    }
    let digest = hex::encode(Sha256::digest(out.as_bytes()));
    let _ = writeln!(out, "checksum {digest}");
    out
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    from_str(&std::fs::read_to_string(path)?)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

struct Lines<'a> {
    it: std::str::Lines<'a>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.it.next().ok_or_else(|| corrupt("weight file ends early"))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' ').or(rest.is_empty().then_some("")))
            .ok_or_else(|| corrupt(format!("expected `{key}`, found `{line}`")))
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.field(key)?;
        v.trim().parse().map_err(|_| corrupt(format!("bad value for {key}: `{v}`")))
    }

    fn floats(&mut self, key: &str) -> Result<Vec<f64>> {
        self.field(key)?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| corrupt(format!("bad number `{t}` in {key}"))))
            .collect()
    }

    fn block(&mut self, key: &str) -> Result<Vec<f64>> {
        let n: usize = self.parse(key)?;
        (0..n)
            .map(|_| {
                let t = self.next()?;
                t.trim().parse().map_err(|_| corrupt(format!("bad number `{t}` in {key}")))
            })
            .collect()
    }
}

pub fn from_str(text: &str) -> Result<Network> {
    let first = text.lines().next().unwrap_or("");
    let version = first
        .strip_prefix(FORMAT_TAG)
        .map(str::trim)
        .ok_or_else(|| corrupt("not a network weight file"))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::Version {
            found: version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let trimmed = text.strip_suffix('\n').unwrap_or(text);
    let (body, last) = trimmed.rsplit_once('\n').ok_or_else(|| corrupt("weight file ends early"))?;
    let stored = last
        .strip_prefix("checksum ")
        .ok_or_else(|| corrupt("missing checksum line (file truncated?)"))?;
    let body = &text[..body.len() + 1];
    if hex::encode(Sha256::digest(body.as_bytes())) != stored.trim() {
        return Err(corrupt("checksum mismatch"));
    }

    let mut l = Lines { it: body.lines() };
    l.next()?;
    let input_dim = l.parse("input_dim")?;
    let output_dim = l.parse("output_dim")?;
    let n_main_layers = l.parse("n_main_layers")?;
    let width = l.parse("width")?;
    let residual = l.parse("residual")?;
    let batch_norm = l.parse("batch_norm")?;
    let output = match l.field("output")? {
        "linear" => OutputActivation::Linear,
        "stretched_sigmoid" => OutputActivation::StretchedSigmoid {
            lo: l.floats("lo")?,
            hi: l.floats("hi")?,
        },
        other => return Err(corrupt(format!("unknown output activation `{other}`"))),
    };
    let flat = l.floats("input_box")?;
    if flat.len() % 2 != 0 {
        return Err(corrupt("odd number of input box bounds"));
    }
    let input_box = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
    let spec = NetworkSpec {
        input_dim,
        output_dim,
        n_main_layers,
        width,
        residual,
        batch_norm,
        output,
        input_box,
    };
    let params = l.block("params")?;
    let buffers = l.block("buffers")?;
    Network::from_parts(spec, params, buffers)
}
