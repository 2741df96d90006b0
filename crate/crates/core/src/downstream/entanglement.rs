use serde::{Deserialize, Serialize};

use super::augmented;
use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;
use crate::prompt_pool::PromptPool;
use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::vqvae::{encode, quantize, GfmParams, PreparedGraph};

/// Inter-domain cosine similarity of mean-pooled representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementReport {
    pub domains: Vec<String>,
    /// Raw input features.
    pub raw: Vec<Vec<f64>>,
    /// Encoder output `z`.
    pub embedding: Vec<Vec<f64>>,
    /// Quantized output `z_q`.
    pub quantized: Vec<Vec<f64>>,
    /// Encoder output of an optional reference model.
    pub reference: Option<Vec<Vec<f64>>>,
}

/// Symmetric cosine matrix with an exact unit diagonal.
pub fn cosine_matrix(means: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = means.len();
    let mut m = vec![vec![1.0; k]; k];
    for a in 0..k {
        for b in (a + 1)..k {
            let c = kernels::cosine(&means[a], &means[b]);
            m[a][b] = c;
            m[b][a] = c;
        }
    }
    m
}

pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let k = m.len();
    if k < 2 {
        return f64::NAN;
    }
    let mut s = 0.0;
    for (a, row) in m.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            if a != b {
                s += v;
            }
        }
    }
    s / (k * (k - 1)) as f64
}

fn pooled<S: Scalar>(t: &crate::tensor::Tensor<S>) -> Result<Vec<f64>> {
    Ok(kernels::mean_rows(t)?.to_f64_vec())
}

pub fn entanglement_diagnostic<S: Scalar>(
    gfm: &GfmParams<S>,
    pool: Option<&PromptPool<S>>,
    domains: &[(String, TextAttributedGraph<S>)],
    reference: Option<&GfmParams<S>>,
) -> Result<EntanglementReport> {
    if domains.len() < 2 {
        return Err(Error::contract("the diagnostic needs at least two domains"));
    }
    let (mut raw, mut emb, mut quant, mut refs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (_, g) in domains {
        if g.node_count() == 0 {
            return Err(Error::contract("cannot pool an empty domain graph"));
        }
        raw.push(pooled(g.features())?);
        let prepared = PreparedGraph::new(&augmented(g, pool, None)?, 0);
        let z = encode(gfm, &prepared)?;
        emb.push(pooled(&z)?);
        quant.push(pooled(&quantize(gfm, &z)?.0)?);
        if let Some(r) = reference {
            refs.push(pooled(&encode(r, &PreparedGraph::new(g, 0))?)?);
        }
    }
    Ok(EntanglementReport {
        domains: domains.iter().map(|(n, _)| n.clone()).collect(),
        raw: cosine_matrix(&raw),
        embedding: cosine_matrix(&emb),
        quantized: cosine_matrix(&quant),
        reference: reference.map(|_| cosine_matrix(&refs)),
    })
}

/// `name,<domains...>` header followed by one row per domain.
pub fn matrix_csv(domains: &[String], m: &[Vec<f64>]) -> String {
    let mut out = format!("domain,{}\n", domains.join(","));
    for (d, row) in domains.iter().zip(m) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&format!("{d},{}\n", cells.join(",")));
    }
    out
}
