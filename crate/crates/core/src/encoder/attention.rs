//! Attention maps for one head: vanilla q-k, value-value, Intra-correlation
//! and the relation-biased variant.

use crate::error::{Error, Result};
use crate::numerics::{gram_f64, softmax_row_into, softmax_rows, Tensor};

/// Default Intra-correlation weights; uniform so each map stays row-stochastic.
pub const DEFAULT_IC_WEIGHTS: [f32; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

/// Which attention map each encoder layer uses.
///
/// Modified layers are always the last `layers` ones of the encoder; all
/// other layers run vanilla q-k attention.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionPolicy {
    VanillaQK,
    /// v-v attention in the final layer only.
    ValueValueLast,
    IntraCorrelation { layers: usize, weights: [f32; 3] },
    /// Intra-correlation plus `softmax_rows(relation)`. `relation` is either
    /// patch-only (`hw x hw`) or already includes the CLS token.
    IntraCorrelationBiased {
        layers: usize,
        weights: [f32; 3],
        relation: Tensor,
    },
}

impl AttentionPolicy {
    pub fn intra(layers: usize) -> Self {
        AttentionPolicy::IntraCorrelation {
            layers,
            weights: DEFAULT_IC_WEIGHTS,
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            AttentionPolicy::VanillaQK => "qk",
            AttentionPolicy::ValueValueLast => "vv",
            AttentionPolicy::IntraCorrelation { .. } => "ic",
            AttentionPolicy::IntraCorrelationBiased { .. } => "icb",
        }
    }

    /// Number of trailing layers whose attention is replaced.
    pub fn modified_layers(&self) -> usize {
        match self {
            AttentionPolicy::VanillaQK => 0,
            AttentionPolicy::ValueValueLast => 1,
            AttentionPolicy::IntraCorrelation { layers, .. }
            | AttentionPolicy::IntraCorrelationBiased { layers, .. } => *layers,
        }
    }

    /// 0-based index of the first modified layer in a `depth`-layer encoder.
    pub fn first_modified(&self, depth: usize) -> usize {
        depth - self.modified_layers().min(depth)
    }

    pub fn is_modified(&self, layer: usize, depth: usize) -> bool {
        layer >= self.first_modified(depth)
    }

    /// Row sum of the attention map at a modified layer.
    pub fn modified_row_sum(&self) -> f64 {
        match self {
            AttentionPolicy::VanillaQK | AttentionPolicy::ValueValueLast => 1.0,
            AttentionPolicy::IntraCorrelation { weights, .. } => {
                weights.iter().map(|&w| w as f64).sum()
            }
            AttentionPolicy::IntraCorrelationBiased { weights, .. } => {
                weights.iter().map(|&w| w as f64).sum::<f64>() + 1.0
            }
        }
    }

    pub fn row_sum_at(&self, layer: usize, depth: usize) -> f64 {
        if self.is_modified(layer, depth) {
            self.modified_row_sum()
        } else {
            1.0
        }
    }

    pub fn validate(&self, depth: usize, tokens: usize) -> Result<()> {
        let check_weights = |w: &[f32; 3]| {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                Err(Error::InvalidArgument(format!(
                    "Intra-correlation weights must be non-negative, got {w:?}"
                )))
            } else {
                Ok(())
            }
        };
        match self {
            AttentionPolicy::VanillaQK | AttentionPolicy::ValueValueLast => Ok(()),
            AttentionPolicy::IntraCorrelation { layers, weights } => {
                if *layers > depth {
                    return Err(Error::InvalidArgument(format!(
                        "policy modifies {layers} layers of a {depth}-layer encoder"
                    )));
                }
                check_weights(weights)
            }
            AttentionPolicy::IntraCorrelationBiased {
                layers,
                weights,
                relation,
            } => {
                if *layers > depth {
                    return Err(Error::InvalidArgument(format!(
                        "policy modifies {layers} layers of a {depth}-layer encoder"
                    )));
                }
                check_weights(weights)?;
                let ok = relation.rank() == 2
                    && relation.rows() == relation.cols()
                    && (relation.rows() == tokens || relation.rows() + 1 == tokens);
                if !ok {
                    return Err(Error::Shape {
                        op: "relation bias",
                        left: relation.shape().to_vec(),
                        right: vec![tokens - 1, tokens - 1],
                    });
                }
                Ok(())
            }
        }
    }
}

/// Scaled dot-product attention map `softmax(aᵀ b / sqrt(d))` for column
/// vector matrices `a`, `b` of shape `d x T`.
pub fn scaled_attention(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::Shape {
            op: "scaled_attention",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (d, t) = (a.rows(), a.cols());
    let scale = 1.0 / (d as f64).sqrt();
    let logits = gram_f64(a, b);
    let mut out = Vec::with_capacity(t * t);
    let mut row = vec![0.0f32; t];
    let mut buf = vec![0.0f64; t];
    for i in 0..t {
        for (r, &l) in row.iter_mut().zip(&logits[i * t..(i + 1) * t]) {
            *r = (l * scale) as f32;
        }
        softmax_row_into(&row, &mut buf).ok_or(Error::DegenerateRow { row: i })?;
        out.extend(buf.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_parts(vec![t, t], out))
}

/// Weighted sum of the self-attention maps within the q, k and v spaces.
pub fn intra_correlation(q: &Tensor, k: &Tensor, v: &Tensor, w: [f32; 3]) -> Result<Tensor> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Shape {
            op: "intra_correlation",
            left: q.shape().to_vec(),
            right: if q.shape() != k.shape() {
                k.shape().to_vec()
            } else {
                v.shape().to_vec()
            },
        });
    }
    let t = q.cols();
    let mut acc = vec![0.0f64; t * t];
    for (space, &weight) in [q, k, v].into_iter().zip(&w) {
        if weight == 0.0 {
            continue;
        }
        let sa = scaled_attention(space, space)?;
        for (a, &s) in acc.iter_mut().zip(sa.data()) {
            *a += weight as f64 * s as f64;
        }
    }
    Ok(Tensor::from_parts(
        vec![t, t],
        acc.into_iter().map(|v| v as f32).collect(),
    ))
}

/// Embeds a patch-only relation into the token space (CLS first) and applies
/// a row softmax. CLS exchanges no bias mass with patches: its row puts all
/// of its mass on itself and patch rows give the CLS column zero weight.
pub fn relation_bias(relation: &Tensor, tokens: usize) -> Result<Tensor> {
    if relation.rows() == tokens {
        return softmax_rows(relation);
    }
    let hw = relation.rows();
    if hw + 1 != tokens || relation.cols() != hw {
        return Err(Error::Shape {
            op: "relation_bias",
            left: relation.shape().to_vec(),
            right: vec![tokens - 1, tokens - 1],
        });
    }
    let soft = softmax_rows(relation)?;
    let mut out = Tensor::zeros(vec![tokens, tokens]);
    out.set(0, 0, 1.0);
    for i in 0..hw {
        out.row_mut(i + 1)[1..].copy_from_slice(soft.row(i));
    }
    Ok(out)
}

/// `S + B`, elementwise.
pub fn biased_attention(static_attn: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if static_attn.shape() != bias.shape() {
        return Err(Error::Shape {
            op: "biased_attention",
            left: static_attn.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    Ok(Tensor::from_parts(
        static_attn.shape().to_vec(),
        static_attn
            .data()
            .iter()
            .zip(bias.data())
            .map(|(a, b)| a + b)
            .collect(),
    ))
}
