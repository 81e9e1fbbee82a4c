//! Plain-text checkpoints for density models and tail generators.
//!
//! ```text
//! tailflow checkpoint
//! version = 1
//! type = flow            # or: tail
//! arch = coupling        # tail only: coupling | feed_forward | residual
//! init = from_density    # tail only
//! dim = 2
//! ```
//!
//! Coupling models then list `max_log_scale`, `layers`, `affine_shift`,
//! `affine_log_scale` and, per layer, `mask`, `scale_sizes`, `scale_params`,
//! `shift_sizes`, `shift_params`. MLP tails list `sizes` and `params`.
//! Floats are written with 17 significant digits, so values round-trip exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{CouplingLayer, FlowModel};
use crate::nn::Mlp;
use crate::tail::{InitMode, TailArch, TailNet};

pub const VERSION: u32 = 1;
const MAGIC: &str = "tailflow checkpoint";

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ")
}

fn ints(v: impl IntoIterator<Item = usize>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn header(out: &mut String, kind: &str) {
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "version = {VERSION}").unwrap();
    writeln!(out, "type = {kind}").unwrap();
}

fn write_flow_body(out: &mut String, f: &FlowModel) {
    let max_log_scale = f.layers().first().map(|l| l.max_log_scale()).unwrap_or(4.0);
    writeln!(out, "dim = {}", f.dim()).unwrap();
    writeln!(out, "max_log_scale = {max_log_scale:.16e}").unwrap();
    writeln!(out, "layers = {}", f.layers().len()).unwrap();
    writeln!(out, "affine_shift = {}", floats(f.affine_shift())).unwrap();
    writeln!(out, "affine_log_scale = {}", floats(f.affine_log_scale())).unwrap();
    for (k, l) in f.layers().iter().enumerate() {
        writeln!(out, "layer.{k}.mask = {}", ints(l.mask().iter().map(|&b| b as usize))).unwrap();
        for (name, net) in [("scale", l.scale_net()), ("shift", l.shift_net())] {
            writeln!(out, "layer.{k}.{name}_sizes = {}", ints(net.sizes().iter().copied())).unwrap();
            writeln!(out, "layer.{k}.{name}_params = {}", floats(net.params())).unwrap();
        }
    }
}

pub fn flow_to_string(f: &FlowModel) -> String {
    let mut out = String::new();
    header(&mut out, "flow");
    write_flow_body(&mut out, f);
    out
}

pub fn tail_to_string(t: &TailNet) -> String {
    let mut out = String::new();
    header(&mut out, "tail");
    let arch = match t.arch() {
        TailArch::Coupling => "coupling",
        TailArch::FeedForward => "feed_forward",
        TailArch::Residual => "residual",
    };
    let init = match t.init_mode() {
        InitMode::FromDensity => "from_density",
        InitMode::Random => "random",
    };
    writeln!(out, "arch = {arch}").unwrap();
    writeln!(out, "init = {init}").unwrap();
    if let Some(f) = t.as_flow() {
        write_flow_body(&mut out, f);
    } else {
        let m = t.as_mlp().expect("non-coupling tails wrap an MLP");
        writeln!(out, "dim = {}", t.dim()).unwrap();
        writeln!(out, "sizes = {}", ints(m.sizes().iter().copied())).unwrap();
        writeln!(out, "params = {}", floats(m.params())).unwrap();
    }
    out
}

struct Fields {
    map: HashMap<String, (usize, String)>,
}

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(Error::format(Some(0), "not a tailflow checkpoint")),
        }
        let mut map = HashMap::new();
        let mut offset = text.lines().next().map(|l| l.len() + 1).unwrap_or(0);
        for (n, line) in lines {
            let here = offset;
            offset += line.len() + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(Some(here as u64), format!("line {}: expected 'key = value'", n + 1)))?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), (here, v.trim().to_string())).is_some() {
                return Err(Error::format(Some(here as u64), format!("duplicate key '{k}'")));
            }
        }
        Ok(Fields { map })
    }

    fn get(&self, key: &str) -> Result<(usize, &str)> {
        self.map
            .get(key)
            .map(|(o, v)| (*o, v.as_str()))
            .ok_or_else(|| Error::format(None, format!("missing key '{key}'")))
    }

    fn str(&self, key: &str) -> Result<&str> {
        Ok(self.get(key)?.1)
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let (off, v) = self.get(key)?;
        v.split_whitespace()
            .map(|s| {
                s.parse::<T>()
                    .map_err(|_| Error::format(Some(off as u64), format!("bad value '{s}' for '{key}'")))
            })
            .collect()
    }

    fn one<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v: Vec<T> = self.list(key)?;
        let off = self.get(key)?.0 as u64;
        match <[T; 1]>::try_from(v) {
            Ok([x]) => Ok(x),
            Err(_) => Err(Error::format(Some(off), format!("'{key}' expects one value"))),
        }
    }

    fn mlp(&self, sizes_key: &str, params_key: &str) -> Result<Mlp> {
        let sizes: Vec<usize> = self.list(sizes_key)?;
        let params: Vec<f64> = self.list(params_key)?;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::format(
                Some(self.get(sizes_key)?.0 as u64),
                format!("invalid '{sizes_key}'"),
            ));
        }
        Mlp::from_parts(sizes, params).ok_or_else(|| {
            Error::format(
                self.get(params_key).ok().map(|g| g.0 as u64),
                format!("'{params_key}' does not match '{sizes_key}'"),
            )
        })
    }
}

fn check_version(f: &Fields, kind: &str) -> Result<()> {
    let v: u32 = f.one("version")?;
    if v != VERSION {
        return Err(Error::format(
            Some(f.get("version")?.0 as u64),
            format!("unsupported checkpoint version {v} (expected {VERSION})"),
        ));
    }
    let t = f.str("type")?;
    if t != kind {
        return Err(Error::format(
            Some(f.get("type")?.0 as u64),
            format!("expected a {kind} checkpoint, found '{t}'"),
        ));
    }
    Ok(())
}

fn read_flow_body(f: &Fields) -> Result<FlowModel> {
    let dim: usize = f.one("dim")?;
    let max_log_scale: f64 = f.one("max_log_scale")?;
    let n: usize = f.one("layers")?;
    let shift: Vec<f64> = f.list("affine_shift")?;
    let log_scale: Vec<f64> = f.list("affine_log_scale")?;
    let mut layers = Vec::with_capacity(n);
    for k in 0..n {
        let mask: Vec<usize> = f.list(&format!("layer.{k}.mask"))?;
        if mask.iter().any(|&b| b > 1) {
            return Err(Error::format(None, format!("layer {k}: mask entries must be 0 or 1")));
        }
        let scale = f.mlp(&format!("layer.{k}.scale_sizes"), &format!("layer.{k}.scale_params"))?;
        let shift_net = f.mlp(&format!("layer.{k}.shift_sizes"), &format!("layer.{k}.shift_params"))?;
        let layer = CouplingLayer::new(
            mask.into_iter().map(|b| b == 1).collect(),
            scale,
            shift_net,
            max_log_scale,
        )
        .map_err(|e| Error::format(None, format!("layer {k}: {e}")))?;
        layers.push(layer);
    }
    FlowModel::from_parts(dim, shift, log_scale, layers).map_err(|e| Error::format(None, e.to_string()))
}

pub fn flow_from_str(text: &str) -> Result<FlowModel> {
    let f = Fields::parse(text)?;
    check_version(&f, "flow")?;
    read_flow_body(&f)
}

pub fn tail_from_str(text: &str) -> Result<TailNet> {
    let f = Fields::parse(text)?;
    check_version(&f, "tail")?;
    let init = match f.str("init")? {
        "from_density" => InitMode::FromDensity,
        "random" => InitMode::Random,
        other => return Err(Error::format(None, format!("unknown init mode '{other}'"))),
    };
    match f.str("arch")? {
        "coupling" => Ok(TailNet::from_flow(read_flow_body(&f)?, init)),
        arch @ ("feed_forward" | "residual") => {
            let m = f.mlp("sizes", "params")?;
            let dim: usize = f.one("dim")?;
            if m.input_dim() != dim {
                return Err(Error::format(None, "'sizes' does not match 'dim'"));
            }
            TailNet::from_mlp(m, arch == "residual", init).map_err(|e| Error::format(None, e.to_string()))
        }
        other => Err(Error::format(None, format!("unknown tail architecture '{other}'"))),
    }
}

pub fn save_flow(path: &Path, f: &FlowModel) -> Result<()> {
    Ok(std::fs::write(path, flow_to_string(f))?)
}

pub fn load_flow(path: &Path) -> Result<FlowModel> {
    flow_from_str(&read(path)?)
}

pub fn save_tail(path: &Path, t: &TailNet) -> Result<()> {
    Ok(std::fs::write(path, tail_to_string(t))?)
}

pub fn load_tail(path: &Path) -> Result<TailNet> {
    tail_from_str(&read(path)?)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
