//! Conversions between nets and named tensor lists.

use sadag_autodiff::Array;
use sadag_core::nets::{GeneratorArch, GeneratorNet, TeacherNet};
use sadag_core::quant::{ActivationQuantizer, BitWidths, QuantNet, WeightQuantizer};
use sadag_core::synthesis::Latents;

use crate::error::{HarnessError, Result};
use crate::format::snap_f32;

fn invalid(detail: impl Into<String>) -> HarnessError {
    HarnessError::Invalid(detail.into())
}

fn vector(values: &[f64]) -> Array {
    Array::from_vec(values.to_vec())
}

fn find<'a>(named: &'a [(String, Array)], key: &str) -> Result<&'a Array> {
    named
        .iter()
        .find(|(n, _)| n == key)
        .map(|(_, a)| a)
        .ok_or_else(|| invalid(format!("checkpoint has no tensor {key:?}")))
}

fn as_usizes(a: &Array) -> Vec<usize> {
    a.data().iter().map(|&v| v as usize).collect()
}

pub fn latents_to_named(lat: &Latents) -> Vec<(String, Array)> {
    let a = &lat.generator.arch;
    let mut meta = vec![a.z_dim, a.base_channels, a.base_size, a.out_channels];
    meta.extend(&a.channels);
    let mut out = vec![("meta.generator".to_string(), vector(&meta.iter().map(|&v| v as f64).collect::<Vec<_>>()))];
    for (i, p) in lat.generator.params.iter().enumerate() {
        out.push((format!("gen.{i}"), p.clone()));
    }
    out.push(("z".to_string(), lat.z.clone()));
    out
}

pub fn latents_from_named(named: &[(String, Array)]) -> Result<Latents> {
    let meta = as_usizes(find(named, "meta.generator")?);
    if meta.len() < 5 {
        return Err(invalid("generator metadata too short"));
    }
    let arch = GeneratorArch {
        z_dim: meta[0],
        base_channels: meta[1],
        base_size: meta[2],
        out_channels: meta[3],
        channels: meta[4..].to_vec(),
    };
    let count = 4 + 3 * arch.channels.len();
    let params = (0..count).map(|i| find(named, &format!("gen.{i}")).cloned()).collect::<Result<Vec<_>>>()?;
    let reference = GeneratorNet::init(&arch, 0)?;
    for (i, (p, r)) in params.iter().zip(&reference.params).enumerate() {
        if p.shape() != r.shape() {
            return Err(invalid(format!("generator tensor {i}: shape {:?}, expected {:?}", p.shape(), r.shape())));
        }
    }
    Ok(Latents { generator: GeneratorNet { arch, params }, z: find(named, "z")?.clone() })
}

/// Base weights and statistics, per-layer grids and rounding logits, and
/// activation ranges.
pub fn quant_to_named(q: &QuantNet) -> Vec<(String, Array)> {
    let mut out: Vec<(String, Array)> =
        q.base.named_arrays().into_iter().map(|(n, a)| (format!("base.{n}"), a)).collect();
    let widths = |v: &[u32]| vector(&v.iter().map(|&b| b as f64).collect::<Vec<_>>());
    out.push(("meta.bits_w".into(), widths(&q.bits.weights)));
    out.push(("meta.bits_a".into(), widths(&q.bits.activations)));
    for (i, wq) in q.weight_q.iter().enumerate() {
        if let Some(wq) = wq {
            out.push((format!("wq.{i}.grid"), vector(&[wq.bits as f64, wq.scale, wq.zero_point, wq.n, wq.p, wq.beta])));
            out.push((format!("wq.{i}.v"), wq.v.clone()));
        }
    }
    for (j, aq) in q.act_q.iter().enumerate() {
        if let Some(aq) = aq {
            let v = match aq.range {
                Some((lo, hi)) => vec![aq.bits as f64, lo, hi],
                None => vec![aq.bits as f64],
            };
            out.push((format!("aq.{j}"), vector(&v)));
        }
    }
    out
}

pub fn quant_from_named(named: &[(String, Array)]) -> Result<QuantNet> {
    let base_named: Vec<(String, Array)> =
        named.iter().filter_map(|(n, a)| n.strip_prefix("base.").map(|s| (s.to_string(), a.clone()))).collect();
    let base = TeacherNet::from_named(&base_named)?;
    let bits_of = |key: &str| -> Result<Vec<u32>> { Ok(find(named, key)?.data().iter().map(|&b| b as u32).collect()) };
    let bits = BitWidths { weights: bits_of("meta.bits_w")?, activations: bits_of("meta.bits_a")? };
    bits.validate(&base.arch)?;
    let mut q = sadag_core::quant::init_quantnet(&base, &bits)?;
    for i in 0..q.weight_layers() {
        if q.weight_q[i].is_none() {
            continue;
        }
        let g = find(named, &format!("wq.{i}.grid"))?.data().to_vec();
        if g.len() != 6 {
            return Err(invalid(format!("layer {i}: grid record has {} entries", g.len())));
        }
        let v = find(named, &format!("wq.{i}.v"))?.clone();
        if v.shape() != q.weight(i).shape() {
            return Err(invalid(format!("layer {i}: rounding logits shaped {:?}", v.shape())));
        }
        q.weight_q[i] =
            Some(WeightQuantizer { bits: g[0] as u32, scale: g[1], zero_point: g[2], n: g[3], p: g[4], v, beta: g[5] });
    }
    for j in 0..q.act_q.len() {
        if q.act_q[j].is_none() {
            continue;
        }
        let a = find(named, &format!("aq.{j}"))?.data().to_vec();
        let range = match a.len() {
            1 => None,
            3 => Some((a[1], a[2])),
            n => return Err(invalid(format!("activation {j}: record has {n} entries"))),
        };
        q.act_q[j] = Some(ActivationQuantizer { bits: a[0] as u32, range });
    }
    Ok(q)
}

/// The quantized net exactly as it would come back from a checkpoint.
pub fn snap_quant(q: &QuantNet) -> Result<QuantNet> {
    let named: Vec<(String, Array)> = quant_to_named(q).into_iter().map(|(n, a)| (n, snap_f32(&a))).collect();
    quant_from_named(&named)
}
