use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::pyramid::FeaturePyramid;

use super::tokens::TokenLayout;

pub fn init_attention_layer<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    rng: &mut R,
) {
    let c = channels;
    for m in ["q", "k", "v"] {
        store.init_glorot(&format!("{prefix}.w{m}"), &[c, c], c, c, rng);
        store.init_zeros(&format!("{prefix}.b{m}"), &[c]);
    }
    store.init_ones(&format!("{prefix}.ln_g"), &[c]);
    store.init_zeros(&format!("{prefix}.ln_b"), &[c]);
}

/// Output of one self-attention layer.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub pyramid: FeaturePyramid,
    /// Row-stochastic `[T, T]` attention weights.
    pub weights: Var,
}

/// Full softmax self-attention over every token of every level.
///
/// Queries and keys see `x + pos`, values see `x`; `pos` is the sinusoidal
/// encoding plus the learned per-level scalar `level_embed`. The result is
/// `LN(x + softmax(QKᵀ/√C)·V)` reshaped back into the pyramid.
pub fn attention_encoder_layer(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    level_embed: Var,
    pyr: &FeaturePyramid,
    max_tokens: usize,
) -> Result<AttentionOutput> {
    let layout = TokenLayout::of(tape, pyr);
    let t = layout.num_tokens();
    if t > max_tokens {
        return Err(Error::Config(format!(
            "attention encoder over {t} tokens exceeds the cap of {max_tokens}"
        )));
    }
    let x = layout.flatten(tape, pyr)?;
    let pos = tape.constant(layout.sinusoidal());
    let lvl = tape.sparse(level_embed, layout.level_embed_map())?;
    let pos = tape.add(pos, lvl)?;
    let xp = tape.add(x, pos)?;

    let q = tape.linear(
        xp,
        p.get(&format!("{prefix}.wq")),
        p.get(&format!("{prefix}.bq")),
    )?;
    let k = tape.linear(
        xp,
        p.get(&format!("{prefix}.wk")),
        p.get(&format!("{prefix}.bk")),
    )?;
    let v = tape.linear(
        x,
        p.get(&format!("{prefix}.wv")),
        p.get(&format!("{prefix}.bv")),
    )?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (layout.channels as f64).sqrt());
    let weights = tape.softmax(logits);
    let agg = tape.matmul(weights, v)?;
    let r = tape.add(x, agg)?;
    let y = tape.layer_norm(
        r,
        p.get(&format!("{prefix}.ln_g")),
        p.get(&format!("{prefix}.ln_b")),
    )?;
    let pyramid = layout.unflatten(tape, y, pyr)?;
    Ok(AttentionOutput { pyramid, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(c: usize, levels: usize, seed: u64) -> (ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_attention_layer(&mut s, "a", c, &mut rng);
        s.init_uniform("lvl", &[levels], 0.5, &mut rng);
        (s, rng)
    }

    #[test]
    fn single_token_attends_to_itself() {
        let c = 4;
        let (s, mut rng) = store(c, 1, 0);
        let mut tape = Tape::default();
        let p = s.bind(&mut tape, false);
        let xv = Tensor::uniform(&[1, 1, c], -1.0, 1.0, &mut rng);
        let x = tape.constant(xv.clone());
        let pyr = FeaturePyramid::new(&tape, vec![x], vec![8]).unwrap();
        let out = attention_encoder_layer(&mut tape, &p, "a", p.get("lvl"), &pyr, 16).unwrap();
        assert_eq!(tape.value(out.weights).data(), &[1.0]);

        let flat = tape.constant(xv.reshape(&[1, c]).unwrap());
        let v = tape.linear(flat, p.get("a.wv"), p.get("a.bv")).unwrap();
        let r = tape.add(flat, v).unwrap();
        let n = tape
            .layer_norm(r, p.get("a.ln_g"), p.get("a.ln_b"))
            .unwrap();
        assert_eq!(
            tape.value(out.pyramid.levels[0]).data(),
            tape.value(n).data()
        );
    }

    #[test]
    fn uniform_logits_average_values() {
        let c = 3;
        let (mut s, mut rng) = store(c, 1, 1);
        s.insert("a.wq", Tensor::zeros(&[c, c]));
        let mut tape = Tape::default();
        let p = s.bind(&mut tape, false);
        let xv = Tensor::uniform(&[2, 2, c], -1.0, 1.0, &mut rng);
        let x = tape.constant(xv.clone());
        let pyr = FeaturePyramid::new(&tape, vec![x], vec![4]).unwrap();
        let out = attention_encoder_layer(&mut tape, &p, "a", p.get("lvl"), &pyr, 16).unwrap();
        for w in tape.value(out.weights).data() {
            assert!((w - 0.25).abs() < 1e-15);
        }

        let flat = tape.constant(xv.reshape(&[4, c]).unwrap());
        let v = tape.linear(flat, p.get("a.wv"), p.get("a.bv")).unwrap();
        let vals = tape.value(v).clone();
        let mean: Vec<f64> = (0..c)
            .map(|j| (0..4).map(|i| vals.data()[i * c + j]).sum::<f64>() / 4.0)
            .collect();
        let mut pre = tape.value(flat).clone();
        for (i, x) in pre.data_mut().iter_mut().enumerate() {
            *x += mean[i % c];
        }
        let pre = tape.constant(pre);
        let n = tape
            .layer_norm(pre, p.get("a.ln_g"), p.get("a.ln_b"))
            .unwrap();
        for (a, b) in tape
            .value(out.pyramid.levels[0])
            .data()
            .iter()
            .zip(tape.value(n).data())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_sum_to_one_on_two_levels() {
        let c = 4;
        let (s, mut rng) = store(c, 2, 2);
        let mut tape = Tape::default();
        let p = s.bind(&mut tape, false);
        let a = tape.constant(Tensor::uniform(&[1, 1, c], -1.0, 1.0, &mut rng));
        let b = tape.constant(Tensor::uniform(&[2, 2, c], -1.0, 1.0, &mut rng));
        let pyr = FeaturePyramid::new(&tape, vec![a, b], vec![4, 2]).unwrap();
        let out = attention_encoder_layer(&mut tape, &p, "a", p.get("lvl"), &pyr, 16).unwrap();
        let w = tape.value(out.weights);
        assert_eq!(w.shape(), &[5, 5]);
        for r in 0..5 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for (l, &v) in pyr.levels.iter().enumerate() {
            assert_eq!(tape.shape(out.pyramid.levels[l]), tape.shape(v));
        }
    }

    #[test]
    fn token_cap_is_config_error() {
        let (s, _) = store(2, 1, 3);
        let mut tape = Tape::default();
        let p = s.bind(&mut tape, false);
        let x = tape.constant(Tensor::ones(&[4, 4, 2]));
        let pyr = FeaturePyramid::new(&tape, vec![x], vec![4]).unwrap();
        let err = attention_encoder_layer(&mut tape, &p, "a", p.get("lvl"), &pyr, 15).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
