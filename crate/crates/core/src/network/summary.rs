//! Per-layer parameter and multiply-accumulate accounting.
//!
//! One MAC is one multiply-accumulate of a convolution:
//! `k_f · k_t · (C_in / g) · C_out · F_out · T_out` per sample. Batch norm,
//! ReLU, pooling, AdaResNorm, bias and residual additions are not MACs;
//! they are tallied as `other_ops`, one per element they write.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::TfSepNet;
use crate::blocks::{AdaResNorm, AxisPath, TfSepConvs};
use crate::error::{Error, Result};
use crate::nn::{count_learned, ConvBnRelu, Module};
use crate::tensor::{Element, Shape};

/// Labels of the architecture rows a layer can belong to.
pub const ROW_LABELS: [&str; 11] = [
    "Input",
    "ConvBnRelu",
    "ConvBnRelu, g=C/2",
    "TF-SepConvs x2",
    "MaxPool",
    "TF-SepConvs x2",
    "MaxPool",
    "TF-SepConvs x2",
    "TF-SepConvs x3",
    "Conv",
    "Avgpool",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    /// Index into [`ROW_LABELS`].
    pub row: usize,
    pub output: Shape,
    pub params: usize,
    pub macs: u64,
    pub other_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub input: Shape,
    pub layers: Vec<LayerSummary>,
    pub total_params: usize,
    pub total_macs: u64,
    pub total_other_ops: u64,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    name: String,
    row: usize,
    output: String,
    params: usize,
    macs: u64,
    other_ops: u64,
}

struct Cost {
    out: Shape,
    macs: u64,
    other: u64,
}

fn cbr<T: Element>(m: &ConvBnRelu<T>, input: Shape) -> Result<Cost> {
    let out = m.conv.output_shape(input)?;
    Ok(Cost {
        out,
        macs: m.conv.macs(input)?,
        other: 2 * out.numel() as u64,
    })
}

fn path<T: Element>(p: &AxisPath<T>, input: Shape) -> Result<Cost> {
    let dw = cbr(&p.depthwise, input)?;
    let pooled = match p.axis.pooled() {
        crate::ops::Axis::F => Shape::new(input.n, input.c, 1, input.t),
        crate::ops::Axis::T => Shape::new(input.n, input.c, input.f, 1),
        crate::ops::Axis::FT => Shape::new(input.n, input.c, 1, 1),
    };
    let pw = cbr(&p.pointwise, pooled)?;
    Ok(Cost {
        out: input,
        macs: dw.macs + pw.macs,
        other: dw.other + pooled.numel() as u64 + pw.other + input.numel() as u64,
    })
}

fn block<T: Element>(b: &TfSepConvs<T>, input: Shape) -> Result<Cost> {
    let mut macs = 0;
    let mut other = 0;
    let mut s = input;
    if let Some(t) = &b.transition {
        let c = cbr(t, s)?;
        macs += c.macs;
        other += c.other;
        s = c.out;
    }
    let both = b.freq.is_some() && b.temp.is_some();
    let ps = if both { s.with_c(s.c / 2) } else { s };
    for p in [&b.freq, &b.temp].into_iter().flatten() {
        let c = path(p, ps)?;
        macs += c.macs;
        other += c.other;
    }
    Ok(Cost {
        out: b.output_shape(input)?,
        macs,
        other,
    })
}

fn norm<T: Element>(n: &AdaResNorm<T>, input: Shape) -> Result<Cost> {
    Ok(Cost {
        out: n.output_shape(input)?,
        macs: 0,
        other: input.numel() as u64,
    })
}

impl Summary {
    pub fn of<T: Element>(net: &TfSepNet<T>, input: Shape) -> Result<Self> {
        net.config().check_input(input)?;
        let mut layers = Vec::new();
        let mut push = |name: String, row: usize, params: usize, c: &Cost| {
            layers.push(LayerSummary {
                name,
                row,
                output: c.out,
                params,
                macs: c.macs,
                other_ops: c.other,
            })
        };
        push("input".into(), 0, 0, &Cost { out: input, macs: 0, other: 0 });

        let c = cbr(&net.conv1, input)?;
        push("stem.conv1".into(), 1, count_learned(&net.conv1), &c);
        let c = cbr(&net.conv2, c.out)?;
        push("stem.conv2".into(), 2, count_learned(&net.conv2), &c);
        let mut s = c.out;
        if let Some(n) = &net.stem_norm {
            let c = norm(n, s)?;
            push("stem.norm".into(), 2, count_learned(n), &c);
        }

        // Stage i lands on row 3, 5, 7, 8; the pools after stages 1 and 2
        // on rows 4 and 6.
        let mut row = 3;
        for (i, stage) in net.stages.iter().enumerate() {
            let prefix = format!("stage{}", i + 1);
            for (j, b) in stage.blocks.iter().enumerate() {
                let c = block(b, s)?;
                s = c.out;
                push(format!("{prefix}.{j}"), row, count_learned(b), &c);
            }
            if let Some(n) = &stage.norm {
                let c = norm(n, s)?;
                push(format!("{prefix}.norm"), row, count_learned(n), &c);
            }
            row += 1;
            if let Some(p) = &stage.pool {
                let out = <_ as Module<T>>::output_shape(p, s)?;
                push(format!("{prefix}.pool"), row, 0, &Cost { out, macs: 0, other: out.numel() as u64 });
                s = out;
                row += 1;
            }
        }

        let out = net.head.output_shape(s)?;
        let c = Cost {
            out,
            macs: net.head.macs(s)?,
            other: if net.head.bias.is_some() { out.numel() as u64 } else { 0 },
        };
        push("head.conv".into(), 9, count_learned(&net.head), &c);
        let pooled = Shape::new(out.n, out.c, 1, 1);
        push("head.pool".into(), 10, 0, &Cost { out: pooled, macs: 0, other: pooled.numel() as u64 });
        Ok(Self::from_layers(input, layers))
    }

    fn from_layers(input: Shape, layers: Vec<LayerSummary>) -> Self {
        Summary {
            input,
            total_params: layers.iter().map(|l| l.params).sum(),
            total_macs: layers.iter().map(|l| l.macs).sum(),
            total_other_ops: layers.iter().map(|l| l.other_ops).sum(),
            layers,
        }
    }

    /// Output shape of each architecture row: the shape after the last
    /// layer assigned to it.
    pub fn row_shapes(&self) -> Vec<(&'static str, Shape)> {
        let mut rows: Vec<Option<Shape>> = vec![None; ROW_LABELS.len()];
        for l in &self.layers {
            rows[l.row] = Some(l.output);
        }
        rows.into_iter()
            .zip(ROW_LABELS)
            .filter_map(|(s, label)| s.map(|s| (label, s)))
            .collect()
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:<20} {:>16} {:>10} {:>12} {:>12}",
            "layer", "row", "output", "params", "macs", "other_ops"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<16} {:<20} {:>16} {:>10} {:>12} {:>12}",
                l.name,
                ROW_LABELS[l.row],
                l.output.compact(),
                l.params,
                l.macs,
                l.other_ops
            );
        }
        let _ = writeln!(
            out,
            "{:<16} {:<20} {:>16} {:>10} {:>12} {:>12}",
            "total", "", "", self.total_params, self.total_macs, self.total_other_ops
        );
        let _ = writeln!(
            out,
            "params {:.1}K, MACs {:.2}M",
            self.total_params as f64 / 1e3,
            self.total_macs as f64 / 1e6
        );
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for l in &self.layers {
            w.serialize(CsvRow {
                name: l.name.clone(),
                row: l.row,
                output: l.output.compact(),
                params: l.params,
                macs: l.macs,
                other_ops: l.other_ops,
            })
            .map_err(|e| Error::Invalid(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
    }

    /// Reads the output of [`Summary::to_csv`]; totals are recomputed.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut layers = Vec::new();
        for rec in r.deserialize::<CsvRow>() {
            let rec = rec.map_err(|e| Error::Invalid(format!("csv: {e}")))?;
            if rec.row >= ROW_LABELS.len() {
                return Err(Error::Invalid(format!("row index {} out of range", rec.row)));
            }
            layers.push(LayerSummary {
                name: rec.name,
                row: rec.row,
                output: Shape::parse(&rec.output)?,
                params: rec.params,
                macs: rec.macs,
                other_ops: rec.other_ops,
            });
        }
        let input = layers
            .first()
            .map(|l| l.output)
            .ok_or_else(|| Error::Invalid("empty summary".into()))?;
        Ok(Self::from_layers(input, layers))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
