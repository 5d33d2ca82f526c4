//! Parameter files.
//!
//! A model is stored as `model.manifest`, one `name shape frozen=<bool>`
//! line per parameter, plus `model.tlab`, the parameter blobs concatenated
//! in manifest order. An adapter file is the text line
//! `tia d=<d> gamma=<g> k=<k>` followed by the adapter's blobs.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use tialab_core::adapters::{AdapterConfig, AdapterKind, AdapterWeights};
use tialab_core::{ParamStore, Tensor};

use crate::blob;
use crate::error::{format_err, io_err, Error, Result};

pub const MANIFEST: &str = "model.manifest";
pub const WEIGHTS: &str = "model.tlab";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn manifest_text(store: &ParamStore<f32>) -> String {
    let mut out = String::from("# name shape frozen\n");
    for (_, p) in store.iter() {
        let _ = writeln!(out, "{} {} frozen={}", p.name, shape_str(p.tensor.shape()), !p.trainable);
    }
    out
}

pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| format_err(format!("{origin}:{}", no + 1), msg);
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, frozen] = parts[..] else {
            return Err(bad("expected `name shape frozen=<bool>`"));
        };
        let shape = shape
            .split('x')
            .map(|e| e.parse::<usize>().ok().filter(|&e| e > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("bad shape"))?;
        let frozen = match frozen {
            "frozen=true" => true,
            "frozen=false" => false,
            _ => return Err(bad("bad frozen flag")),
        };
        out.push(ManifestEntry {
            name: name.to_string(),
            shape,
            frozen,
        });
    }
    Ok(out)
}

pub fn save_store(store: &ParamStore<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest_text(store)).map_err(io_err(&mpath))?;
    let wpath = dir.join(WEIGHTS);
    let file = fs::File::create(&wpath).map_err(io_err(&wpath))?;
    let mut w = BufWriter::new(file);
    for (_, p) in store.iter() {
        blob::write_to(&mut w, &p.tensor).map_err(io_err(&wpath))?;
    }
    w.flush().map_err(io_err(&wpath))
}

/// Overwrites every parameter of `store` from `dir`. Names, shapes and
/// frozen flags must match the store exactly.
pub fn load_store(store: &mut ParamStore<f32>, dir: &Path) -> Result<()> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let entries = parse_manifest(&text, &mpath.display().to_string())?;
    if entries.len() != store.len() {
        return Err(Error::Load(format!(
            "{} lists {} parameters, the model has {}",
            mpath.display(),
            entries.len(),
            store.len()
        )));
    }
    let wpath = dir.join(WEIGHTS);
    let file = fs::File::open(&wpath).map_err(io_err(&wpath))?;
    let mut r = BufReader::new(file);
    let origin = wpath.display().to_string();
    let ids: Vec<_> = store.ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for (id, e) in ids.iter().zip(&entries) {
        let p = store.get(*id);
        if p.name != e.name || p.tensor.shape() != e.shape.as_slice() || p.trainable == e.frozen {
            return Err(Error::Load(format!(
                "expected {} {} frozen={}, found {} {} frozen={}",
                p.name,
                shape_str(p.tensor.shape()),
                !p.trainable,
                e.name,
                shape_str(&e.shape),
                e.frozen
            )));
        }
        let t = blob::read_from(&mut r, &origin)?;
        if t.shape() != e.shape.as_slice() {
            return Err(format_err(&origin, format!("blob for {} has shape {:?}", e.name, t.shape())));
        }
        tensors.push(t);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io_err(&wpath))?;
    if !rest.is_empty() {
        return Err(format_err(&origin, format!("{} trailing bytes", rest.len())));
    }
    for (id, t) in ids.into_iter().zip(tensors) {
        store.set(id, t)?;
    }
    Ok(())
}

pub fn adapter_header(cfg: &AdapterConfig) -> String {
    let mut h = format!("tia d={} gamma={} k={}", cfg.dim, cfg.gamma, cfg.kernel);
    if cfg.kind != AdapterKind::Tia {
        let _ = write!(h, " kind={}", cfg.kind.name());
    }
    h
}

pub fn parse_adapter_header(line: &str) -> Option<AdapterConfig> {
    let mut parts = line.split_whitespace();
    if parts.next()? != "tia" {
        return None;
    }
    let (mut d, mut g, mut k, mut kind) = (None, None, None, AdapterKind::Tia);
    for p in parts {
        let (key, v) = p.split_once('=')?;
        match key {
            "d" => d = v.parse().ok(),
            "gamma" => g = v.parse().ok(),
            "k" => k = v.parse().ok(),
            "kind" => kind = AdapterKind::parse(v)?,
            _ => return None,
        }
    }
    Some(AdapterConfig {
        dim: d?,
        gamma: g?,
        kernel: k?,
        kind,
    })
}

pub fn save_adapter(path: &Path, w: &AdapterWeights, store: &ParamStore<f32>) -> Result<()> {
    let mut out = adapter_header(&w.config).into_bytes();
    out.push(b'\n');
    for id in w.param_ids() {
        blob::write_to(&mut out, store.tensor(id)).map_err(io_err(path))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Header and blobs of an adapter file.
pub fn read_adapter(path: &Path) -> Result<(AdapterConfig, Vec<Tensor<f32>>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let origin = path.display().to_string();
    let mut r = bytes.as_slice();
    let mut header = String::new();
    r.read_line(&mut header).map_err(io_err(path))?;
    let cfg = parse_adapter_header(header.trim_end())
        .ok_or_else(|| format_err(&origin, format!("bad adapter header {:?}", header.trim_end())))?;
    let mut tensors = Vec::new();
    while !r.is_empty() {
        tensors.push(blob::read_from(&mut r, &origin)?);
    }
    Ok((cfg, tensors))
}

/// Loads an adapter file into existing adapter weights of the same layout.
pub fn load_adapter(path: &Path, w: &AdapterWeights, store: &mut ParamStore<f32>) -> Result<()> {
    let (cfg, tensors) = read_adapter(path)?;
    if cfg != w.config {
        return Err(Error::Load(format!(
            "{} holds `{}`, the model expects `{}`",
            path.display(),
            adapter_header(&cfg),
            adapter_header(&w.config)
        )));
    }
    let ids = w.param_ids();
    if ids.len() != tensors.len() {
        return Err(Error::Load(format!("{} holds {} tensors, expected {}", path.display(), tensors.len(), ids.len())));
    }
    for (id, t) in ids.iter().zip(&tensors) {
        if store.tensor(*id).shape() != t.shape() {
            return Err(Error::Load(format!("{}: tensor shape {:?} does not match", path.display(), t.shape())));
        }
    }
    for (id, t) in ids.into_iter().zip(tensors) {
        store.set(id, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use tialab_core::adapters::init_adapter;

    fn store() -> (ParamStore<f32>, AdapterWeights) {
        let mut s = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        s.add("frozen.w", Tensor::full(&[2, 3], 0.5), false);
        let a = init_adapter(&mut s, "a", AdapterConfig::tia(8, 4, 3), &mut rng).unwrap();
        (s, a)
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (mut s, a) = store();
        s.set(a.up.weight, Tensor::full(&[2, 8], 0.25)).unwrap();
        save_store(&s, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.contains("frozen.w 2x3 frozen=true"));
        let (mut t, _) = store();
        load_store(&mut t, dir.path()).unwrap();
        for ((_, p), (_, q)) in s.iter().zip(t.iter()) {
            assert_eq!((&p.name, &*p.tensor, p.trainable), (&q.name, &*q.tensor, q.trainable));
        }
    }

    #[test]
    fn mismatched_store_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let (s, _) = store();
        save_store(&s, dir.path()).unwrap();
        let mut other = ParamStore::new();
        other.add("frozen.w", Tensor::full(&[3, 2], 0.5f32), false);
        assert!(matches!(load_store(&mut other, dir.path()), Err(Error::Load(_))));
        let (mut flipped, _) = store();
        let id = flipped.find("frozen.w").unwrap();
        flipped.set_trainable(id, true);
        assert!(matches!(load_store(&mut flipped, dir.path()), Err(Error::Load(_))));
    }

    #[test]
    fn adapter_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tia");
        let (mut s, a) = store();
        s.set(a.up.bias, Tensor::full(&[8], -1.0)).unwrap();
        save_adapter(&path, &a, &s).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"tia d=8 gamma=4 k=3\nTLAB1"));
        let (mut t, b) = store();
        load_adapter(&path, &b, &mut t).unwrap();
        assert_eq!(t.tensor(b.up.bias), s.tensor(a.up.bias));
        let (cfg, tensors) = read_adapter(&path).unwrap();
        assert_eq!(cfg, a.config);
        assert_eq!(tensors.len(), a.param_ids().len());
    }

    #[test]
    fn headers() {
        let std = AdapterConfig {
            kind: AdapterKind::Standard,
            ..AdapterConfig::tia(16, 2, 5)
        };
        assert_eq!(adapter_header(&std), "tia d=16 gamma=2 k=5 kind=standard");
        for c in [std, AdapterConfig::tia(8, 4, 3)] {
            assert_eq!(parse_adapter_header(&adapter_header(&c)), Some(c));
        }
        assert_eq!(parse_adapter_header("lora d=1"), None);
        assert_eq!(parse_adapter_header("tia d=8 gamma=4"), None);
    }
}
