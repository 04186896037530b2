//! Plain-text checkpoints.
//!
//! ```text
//! ftle-node-ckpt v1 d=2 K=1 ell=2 dims=2,5,5,5,2 act=tanh breaks=0,10
//! block=1 layer=1 tensor=W shape=5x2 frozen=0
//! <r·c values, 17 significant digits>
//! ...
//! block=L layer=1 tensor=W shape=2x2 frozen=0
//! block=L layer=1 tensor=b shape=2x1 frozen=0
//! ```
//!
//! Every tensor header is followed by one line of whitespace-separated
//! values. The readout `L` stores `A` under `tensor=W` and `c` under
//! `tensor=b`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{NodeModel, OutputLayer};
use crate::vecfield::{Activation, FrozenFlags, LayeredVectorField, ParamSchedule, TensorKind};

pub const MAGIC: &str = "ftle-node-ckpt";

fn fmt_values(out: &mut String, values: &[f64]) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:.16e}");
    }
    out.push('\n');
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn to_string(model: &NodeModel) -> String {
    let field = &model.field;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{MAGIC} v1 d={} K={} ell={} dims={} act={} breaks={}",
        field.dim(),
        model.schedule.num_blocks(),
        field.ell(),
        join(&field.dims()),
        field.activation,
        join(model.schedule.breakpoints()),
    );
    for (k, block) in model.schedule.blocks().iter().enumerate() {
        for (i, (layer, flags)) in block.iter().zip(field.frozen()).enumerate() {
            let shape = layer.shape();
            for kind in TensorKind::ALL {
                let (r, c) = shape.tensor_shape(kind);
                let _ = writeln!(
                    out,
                    "block={} layer={} tensor={} shape={r}x{c} frozen={}",
                    k + 1,
                    i + 1,
                    kind.symbol(),
                    u8::from(flags.get(kind))
                );
                fmt_values(&mut out, layer.tensor(kind));
            }
        }
    }
    let (r, c) = model.output.a.shape();
    let _ = writeln!(out, "block=L layer=1 tensor=W shape={r}x{c} frozen=0");
    fmt_values(&mut out, model.output.a.data());
    let _ = writeln!(
        out,
        "block=L layer=1 tensor=b shape={}x1 frozen=0",
        model.output.c.len()
    );
    fmt_values(&mut out, &model.output.c);
    out
}

pub fn save(model: &NodeModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_string(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<NodeModel> {
    let text = std::fs::read_to_string(path)?;
    parse(&text)
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Checkpoint { line, msg: msg.into() }
}

fn key_values(line: &str) -> HashMap<&str, &str> {
    line.split_whitespace().filter_map(|tok| tok.split_once('=')).collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.parse::<T>().map_err(|_| err(line, format!("bad {what} entry '{v}'"))))
        .collect()
}

pub fn parse(text: &str) -> Result<NodeModel> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (ln, header) = lines.next().ok_or_else(|| err(1, "empty checkpoint"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some(MAGIC) || toks.next() != Some("v1") {
        return Err(err(ln, format!("expected '{MAGIC} v1' header")));
    }
    let kv = key_values(header);
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| err(ln, format!("header missing '{k}'")))
    };
    let d: usize = get("d")?.parse().map_err(|_| err(ln, "bad d"))?;
    let n_blocks: usize = get("K")?.parse().map_err(|_| err(ln, "bad K"))?;
    let ell: usize = get("ell")?.parse().map_err(|_| err(ln, "bad ell"))?;
    let dims: Vec<usize> = parse_list(get("dims")?, ln, "dims")?;
    let activation: Activation = kv.get("act").copied().unwrap_or("tanh").parse()?;
    if dims.len() != 2 * ell + 1 || dims[0] != d {
        return Err(err(ln, "dims inconsistent with d/ell"));
    }
    let breaks: Vec<f64> = match kv.get("breaks") {
        Some(s) => parse_list(s, ln, "breaks")?,
        None => return Err(err(ln, "header missing 'breaks'")),
    };

    let mut frozen = vec![FrozenFlags::default(); ell];
    let placeholder = LayeredVectorField::new(activation, &dims, frozen.clone())?;
    let mut blocks: Vec<_> = (0..n_blocks).map(|_| placeholder.zero_block()).collect();
    let mut output = OutputLayer::zeros(d, d);
    let mut seen_output = (false, false);
    let mut frozen_seen = vec![[None::<bool>; 4]; ell];

    while let Some((ln, head)) = lines.next() {
        let kv = key_values(head);
        let field = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| err(ln, format!("tensor line missing '{k}'")))
        };
        let block = field("block")?;
        let layer: usize = field("layer")?.parse().map_err(|_| err(ln, "bad layer"))?;
        let kind = TensorKind::parse(field("tensor")?).ok_or_else(|| err(ln, "bad tensor name"))?;
        let (r, c) = field("shape")?
            .split_once('x')
            .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
            .ok_or_else(|| err(ln, "bad shape"))?;
        let is_frozen = match field("frozen")? {
            "0" => false,
            "1" => true,
            _ => return Err(err(ln, "frozen must be 0 or 1")),
        };
        let (vln, vline) = lines.next().ok_or_else(|| err(ln, "tensor values missing"))?;
        let values: Vec<f64> = vline
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| err(vln, format!("bad value '{v}'"))))
            .collect::<Result<_>>()?;
        if values.len() != r * c {
            return Err(err(vln, format!("expected {} values, got {}", r * c, values.len())));
        }

        if block == "L" {
            match kind {
                TensorKind::W => {
                    if c != d {
                        return Err(err(ln, "output matrix must have d columns"));
                    }
                    output.a = Mat::from_vec(r, c, values);
                    seen_output.0 = true;
                }
                TensorKind::B => {
                    output.c = values;
                    seen_output.1 = true;
                }
                _ => return Err(err(ln, "output layer has only W and b")),
            }
            continue;
        }

        let k: usize = block.parse().map_err(|_| err(ln, "bad block index"))?;
        if k == 0 || k > n_blocks || layer == 0 || layer > ell {
            return Err(err(ln, "block/layer index out of range"));
        }
        let expected = placeholder.layers()[layer - 1].tensor_shape(kind);
        if expected != (r, c) {
            return Err(err(
                ln,
                format!("shape {r}x{c} but architecture expects {}x{}", expected.0, expected.1),
            ));
        }
        let slot = &mut frozen_seen[layer - 1][kind as usize];
        match slot {
            Some(prev) if *prev != is_frozen => return Err(err(ln, "frozen flag differs between blocks")),
            _ => *slot = Some(is_frozen),
        }
        frozen[layer - 1].set(kind, is_frozen);
        blocks[k - 1][layer - 1].tensor_mut(kind).copy_from_slice(&values);
    }

    if !(seen_output.0 && seen_output.1) {
        return Err(err(0, "output layer tensors missing"));
    }
    let field = LayeredVectorField::new(activation, &dims, frozen)?;
    let schedule = ParamSchedule::new(breaks, blocks)?;
    NodeModel::new(field, schedule, output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut m = Preset::Ex1.skeleton(10.0);
        let flat: Vec<f64> = (0..m.num_params()).map(|i| ((i as f64) * 0.37).sin() / 3.0).collect();
        m.set_params_flat(&flat);
        let text = to_string(&m);
        assert!(text.starts_with("ftle-node-ckpt v1 d=2 K=1 ell=2 dims=2,5,5,5,2"));
        assert!(text.contains("block=1 layer=1 tensor=V shape=5x5 frozen=1"));
        assert!(text.contains("block=L layer=1 tensor=W shape=2x2 frozen=0"));
        let back = parse(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_string(&back), text);
    }

    #[test]
    fn ex2_breakpoints_survive() {
        let m = Preset::Ex2.skeleton(10.0);
        let back = parse(&to_string(&m)).unwrap();
        assert_eq!(back.schedule.breakpoints(), m.schedule.breakpoints());
        assert_eq!(back.field.frozen(), m.field.frozen());
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse("").is_err());
        assert!(parse("not-a-checkpoint v1").is_err());
        let m = Preset::Ex2.skeleton(10.0);
        let text = to_string(&m).replace("shape=2x2 frozen=0", "shape=3x2 frozen=0");
        assert!(parse(&text).is_err());
    }
}
