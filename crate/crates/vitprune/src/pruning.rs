//! Training-free token pruning.
//!
//! Importance comes from one layer's attention internals: the attention score
//! reduces heads with an element-wise max, sums what each token *receives*
//! (column sum), and normalizes by the maximum; the value score reduces heads
//! with max, sums value channels per token, and softmax-normalizes. Total
//! importance is their sum. The R lowest-scoring prunable tokens are replaced
//! by a single "inattentive" token holding their mean activation, appended
//! after the kept set, so downstream layers keep a summary of what was cut.
//!
//! Special (class/register) prefix tokens are exempt from scoring and pruning;
//! they carry an infinite sentinel score.

use crate::error::{Error, Result};
use crate::model::{AttentionCapture, TokenReducer};
use crate::ops;
use crate::tensor::Tensor;

/// Per-token importance for one sample. Special-token entries hold +inf in
/// `a_s` (and 0 in `v_s`) and never participate in ranking.
#[derive(Debug, Clone)]
pub struct ImportanceScores {
    /// Attention-received score, max-normalized over prunable tokens.
    pub a_s: Vec<f32>,
    /// Value-magnitude score, softmax-normalized over prunable tokens.
    pub v_s: Vec<f32>,
    /// `a_s + v_s`, the pruning criterion.
    pub total: Vec<f32>,
}

fn check_attn_shape(attn: &Tensor) -> Result<(usize, usize)> {
    match attn.shape() {
        [h, n, m] if n == m => Ok((*h, *n)),
        [_, n, m] => Err(Error::Shape(format!(
            "attention slices must be square, got {n}x{m}"
        ))),
        other => Err(Error::Shape(format!(
            "attention must be [heads, n, n], got {other:?}"
        ))),
    }
}

fn check_special(special_count: usize, n: usize) -> Result<()> {
    if special_count >= n {
        return Err(Error::Validation(format!(
            "special_count {special_count} leaves no prunable tokens among {n}"
        )));
    }
    Ok(())
}

/// Attention score per token: max over heads, sum over rows (attention each
/// token receives), divided by the maximum over prunable tokens.
pub fn attention_scores(attn: &Tensor, special_count: usize) -> Result<Vec<f32>> {
    let (_, n) = check_attn_shape(attn)?;
    check_special(special_count, n)?;
    let merged = ops::amax(attn, 0)?; // [n, n]
    let received = ops::sum(&merged, 0)?; // column sums, [n]
    let col = received.data();
    let mx = col[special_count..]
        .iter()
        .fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    if !mx.is_finite() || mx <= 0.0 {
        // Post-softmax attention is strictly positive, so this only fires on
        // inputs that never went through a softmax.
        return Err(Error::Validation(
            "attention scores degenerate: non-positive column sums".into(),
        ));
    }
    let mut a_s = vec![f32::INFINITY; n];
    for j in special_count..n {
        a_s[j] = col[j] / mx;
    }
    Ok(a_s)
}

/// Value score per token: max over heads, sum over value channels, softmax
/// over prunable tokens. Special entries hold 0 (excluded from the softmax).
pub fn value_scores(values: &Tensor, special_count: usize) -> Result<Vec<f32>> {
    let n = match values.shape() {
        [_, n, _] => *n,
        other => {
            return Err(Error::Shape(format!(
                "values must be [heads, n, channels], got {other:?}"
            )))
        }
    };
    check_special(special_count, n)?;
    let merged = ops::amax(values, 0)?; // [n, C]
    let per_token = ops::sum(&merged, 1)?; // [n]
    let raw = per_token.data();

    let mut v_s = vec![0.0f32; n];
    let mut mx = f32::NEG_INFINITY;
    for &v in &raw[special_count..] {
        mx = mx.max(v);
    }
    let mut denom = 0.0f32;
    for j in special_count..n {
        let e = (raw[j] - mx).exp();
        v_s[j] = e;
        denom += e;
    }
    let inv = 1.0 / denom;
    for v in &mut v_s[special_count..] {
        *v *= inv;
    }
    Ok(v_s)
}

/// Combined importance for one captured layer.
pub fn token_importance(
    capture: &AttentionCapture,
    special_count: usize,
) -> Result<ImportanceScores> {
    let (_, n) = check_attn_shape(&capture.attn)?;
    let vn = capture.values.shape().get(1).copied().unwrap_or(0);
    if vn != n {
        return Err(Error::Shape(format!(
            "attention token count {n} disagrees with values token count {vn}"
        )));
    }
    let a_s = attention_scores(&capture.attn, special_count)?;
    let v_s = value_scores(&capture.values, special_count)?;
    let total = a_s.iter().zip(&v_s).map(|(a, v)| a + v).collect();
    Ok(ImportanceScores { a_s, v_s, total })
}

/// Indices pruned for a given R: the R lowest-total prunable tokens, ties
/// resolved by keeping the lower index. Returned ascending.
fn pruned_indices(scores: &ImportanceScores, special_count: usize, r: usize) -> Vec<usize> {
    let n = scores.total.len();
    let mut order: Vec<usize> = (special_count..n).collect();
    // Descending by score; ascending index among equals, so the lower index
    // lands in the kept prefix.
    order.sort_by(|&i, &j| scores.total[j].total_cmp(&scores.total[i]).then(i.cmp(&j)));
    let mut pruned: Vec<usize> = order[order.len() - r..].to_vec();
    pruned.sort_unstable();
    pruned
}

/// Keep the special prefix and the highest-scoring tokens in original order,
/// replacing the R pruned tokens by their mean activation appended at the
/// end. R = 0 is the identity (no inattentive token). Output token count is
/// `n − R + 1` for R ≥ 1.
pub fn prune_tokens(activations: &Tensor, scores: &ImportanceScores, r: usize) -> Result<Tensor> {
    let (batch, n, d, rank2) = match activations.shape() {
        [n, d] => (1, *n, *d, true),
        [b, n, d] => (*b, *n, *d, false),
        other => {
            return Err(Error::Shape(format!(
                "activations must be [n, d] or [b, n, d], got {other:?}"
            )))
        }
    };
    if scores.total.len() != n {
        return Err(Error::Shape(format!(
            "scores cover {} tokens but activations have {n}",
            scores.total.len()
        )));
    }
    let special = scores.a_s.iter().take_while(|v| v.is_infinite()).count();
    if r == 0 {
        return Ok(activations.clone());
    }
    if r > n - special - 1 {
        return Err(Error::Validation(format!(
            "R {r} out of range: at most {} of {n} tokens are prunable ({} special, \
             one informative token must remain)",
            n - special - 1,
            special
        )));
    }

    let pruned = pruned_indices(scores, special, r);
    let out_n = n - r + 1;
    let mut out = vec![0.0f32; batch * out_n * d];
    let data = activations.data();
    for s in 0..batch {
        let src = &data[s * n * d..(s + 1) * n * d];
        let dst = &mut out[s * out_n * d..(s + 1) * out_n * d];
        let mut w = 0;
        let mut prune_iter = pruned.iter().peekable();
        for t in 0..n {
            if prune_iter.peek() == Some(&&t) {
                prune_iter.next();
                continue;
            }
            dst[w * d..(w + 1) * d].copy_from_slice(&src[t * d..(t + 1) * d]);
            w += 1;
        }
        debug_assert_eq!(w, out_n - 1);
        // Inattentive token: mean of the pruned activations, accumulated in
        // ascending token order.
        let inattentive = &mut dst[(out_n - 1) * d..out_n * d];
        for &t in &pruned {
            for (acc, &v) in inattentive.iter_mut().zip(&src[t * d..(t + 1) * d]) {
                *acc += v;
            }
        }
        for acc in inattentive.iter_mut() {
            *acc /= r as f32;
        }
    }
    let shape = if rank2 {
        vec![out_n, d]
    } else {
        vec![batch, out_n, d]
    };
    Tensor::new(shape, out)
}

/// The deployed pruning hook: scores the capture and prunes R tokens.
pub struct SchedulePruner {
    pub layer_index: usize,
    pub r: usize,
    pub special_count: usize,
}

impl TokenReducer for SchedulePruner {
    fn layer_index(&self) -> usize {
        self.layer_index
    }
    fn reduce(&self, capture: &AttentionCapture, activations: Tensor) -> Result<Tensor> {
        let scores = token_importance(capture, self.special_count)?;
        prune_tokens(&activations, &scores, self.r)
    }
}

/// Removal hook that keeps an explicit token subset (no inattentive token).
/// Used by the random-removal accuracy proxy. `kept` must be strictly
/// ascending and start with the full special prefix.
pub struct KeepSubset {
    pub layer_index: usize,
    pub kept: Vec<usize>,
}

impl TokenReducer for KeepSubset {
    fn layer_index(&self) -> usize {
        self.layer_index
    }
    fn reduce(&self, _capture: &AttentionCapture, activations: Tensor) -> Result<Tensor> {
        let (n, d) = (activations.shape()[0], activations.shape()[1]);
        let mut out = Vec::with_capacity(self.kept.len() * d);
        let mut prev: Option<usize> = None;
        for &t in &self.kept {
            if t >= n || prev.is_some_and(|p| p >= t) {
                return Err(Error::Validation(format!(
                    "kept indices must be strictly ascending and below {n}"
                )));
            }
            prev = Some(t);
            out.extend_from_slice(&activations.data()[t * d..(t + 1) * d]);
        }
        Tensor::new(vec![self.kept.len(), d], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn capture_from(attn: Tensor, values: Tensor) -> AttentionCapture {
        AttentionCapture {
            attn,
            values,
            layer_index: 0,
        }
    }

    /// Row-stochastic random attention: softmax over random logits.
    fn random_capture(h: usize, n: usize, c: usize, seed: u64) -> AttentionCapture {
        let mut rng = SplitMix64::new(seed);
        let logits: Vec<f32> = (0..h * n * n).map(|_| rng.next_symmetric(3.0)).collect();
        let attn = ops::softmax(&Tensor::new(vec![h, n, n], logits).unwrap(), 2).unwrap();
        let values: Vec<f32> = (0..h * n * c).map(|_| rng.next_symmetric(2.0)).collect();
        capture_from(attn, Tensor::new(vec![h, n, c], values).unwrap())
    }

    #[test]
    fn uniform_attention_scores_all_ones() {
        let attn = Tensor::new(vec![1, 4, 4], vec![0.25; 16]).unwrap();
        let a_s = attention_scores(&attn, 0).unwrap();
        assert_eq!(a_s, vec![1.0; 4]);
    }

    #[test]
    fn self_only_attention_scores_all_ones() {
        let mut eye = vec![0.0f32; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let attn = Tensor::new(vec![1, 4, 4], eye).unwrap();
        assert_eq!(attention_scores(&attn, 0).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn attention_scores_match_loop_oracle() {
        let cap = random_capture(2, 3, 4, 11);
        let a_s = attention_scores(&cap.attn, 0).unwrap();
        // Independent oracle: explicit loops, same reduction order.
        let d = cap.attn.data();
        let n = 3;
        let mut col = vec![0.0f32; n];
        for j in 0..n {
            for i in 0..n {
                let m = d[i * n + j].max(d[n * n + i * n + j]);
                col[j] += m;
            }
        }
        let mx = col.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        for j in 0..n {
            assert!((a_s[j] - col[j] / mx).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_scores_reject_non_square() {
        let bad = Tensor::zeros(vec![1, 3, 4]).unwrap();
        assert!(attention_scores(&bad, 0).is_err());
    }

    #[test]
    fn equal_values_give_uniform_value_scores() {
        let values = Tensor::new(vec![2, 4, 3], vec![0.5; 24]).unwrap();
        let v_s = value_scores(&values, 1).unwrap();
        assert_eq!(v_s[0], 0.0); // special placeholder
        for &v in &v_s[1..] {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dominant_value_token_scores_highest() {
        let mut data = vec![0.1f32; 3 * 4];
        // Boost every channel of token 1.
        for c in 0..4 {
            data[4 + c] += 10.0;
        }
        let values = Tensor::new(vec![1, 3, 4], data).unwrap();
        let v_s = value_scores(&values, 0).unwrap();
        assert!(v_s[1] > v_s[0] && v_s[1] > v_s[2]);
        let sum: f32 = v_s.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn value_scores_match_loop_oracle() {
        let cap = random_capture(2, 3, 4, 12);
        let v_s = value_scores(&cap.values, 0).unwrap();
        let d = cap.values.data();
        let (n, c) = (3, 4);
        let mut raw = vec![0.0f32; n];
        for t in 0..n {
            for ch in 0..c {
                raw[t] += d[t * c + ch].max(d[n * c + t * c + ch]);
            }
        }
        let mx = raw.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f32> = raw.iter().map(|&v| (v - mx).exp()).collect();
        let denom: f32 = exps.iter().sum();
        for t in 0..n {
            assert!((v_s[t] - exps[t] / denom).abs() < 1e-6);
        }
    }

    #[test]
    fn token_importance_is_componentwise_sum() {
        let cap = random_capture(3, 8, 4, 13);
        let scores = token_importance(&cap, 2).unwrap();
        assert!(scores.a_s[0].is_infinite() && scores.a_s[1].is_infinite());
        assert_eq!(scores.v_s[0], 0.0);
        assert!(scores.total[0].is_infinite());
        for t in 2..8 {
            assert_eq!(scores.total[t], scores.a_s[t] + scores.v_s[t]);
        }
        let mx = scores.a_s[2..]
            .iter()
            .fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        assert_eq!(mx, 1.0);
    }

    #[test]
    fn uniform_capture_gives_equal_totals() {
        let attn = Tensor::new(vec![2, 5, 5], vec![0.2; 50]).unwrap();
        let values = Tensor::new(vec![2, 5, 3], vec![1.0; 30]).unwrap();
        let scores = token_importance(&capture_from(attn, values), 0).unwrap();
        for &t in &scores.total {
            assert!((t - scores.total[0]).abs() < 1e-6);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // t indexes perm and base in lockstep
    fn permuting_tokens_permutes_scores() {
        let special = 1;
        let (h, n, c) = (2usize, 7usize, 4usize);
        let cap = random_capture(h, n, c, 14);
        let base = token_importance(&cap, special).unwrap();

        // Cyclic shift of the prunable tokens; specials stay in place.
        let mut perm: Vec<usize> = (0..n).collect();
        perm[special..].rotate_left(2);
        let mut attn = vec![0.0f32; h * n * n];
        let mut values = vec![0.0f32; h * n * c];
        for head in 0..h {
            for i in 0..n {
                for j in 0..n {
                    attn[(head * n + perm[i]) * n + perm[j]] =
                        cap.attn.data()[(head * n + i) * n + j];
                }
                for ch in 0..c {
                    values[(head * n + perm[i]) * c + ch] =
                        cap.values.data()[(head * n + i) * c + ch];
                }
            }
        }
        let permuted = capture_from(
            Tensor::new(vec![h, n, n], attn).unwrap(),
            Tensor::new(vec![h, n, c], values).unwrap(),
        );
        let moved = token_importance(&permuted, special).unwrap();
        for t in special..n {
            // Summation order changes under permutation, so equality is
            // approximate rather than bitwise.
            assert!(
                (moved.total[perm[t]] - base.total[t]).abs() < 1e-5,
                "token {t}: {} vs {}",
                moved.total[perm[t]],
                base.total[t]
            );
        }
    }

    fn scores_from_totals(special: usize, totals: &[f32]) -> ImportanceScores {
        let mut a_s = totals.to_vec();
        for v in a_s.iter_mut().take(special) {
            *v = f32::INFINITY;
        }
        ImportanceScores {
            v_s: vec![0.0; totals.len()],
            total: a_s.clone(),
            a_s,
        }
    }

    fn rows(n: usize, d: usize) -> Tensor {
        // Row t filled with the value t, so gathered rows are recognizable.
        let data = (0..n * d).map(|i| (i / d) as f32).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn zero_r_is_identity() {
        let acts = rows(5, 3);
        let scores = scores_from_totals(1, &[0.0, 0.4, 0.3, 0.2, 0.1]);
        let out = prune_tokens(&acts, &scores, 0).unwrap();
        assert_eq!(out, acts);
    }

    #[test]
    fn hand_example_prunes_lowest_two() {
        // Prunable scores [0.9, 0.1, 0.8, 0.2]: R=2 prunes tokens 1 and 3.
        let acts = rows(4, 2);
        let scores = scores_from_totals(0, &[0.9, 0.1, 0.8, 0.2]);
        let out = prune_tokens(&acts, &scores, 2).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert_eq!(out.row(0), &[0.0, 0.0]);
        assert_eq!(out.row(1), &[2.0, 2.0]);
        assert_eq!(out.row(2), &[2.0, 2.0]); // mean of rows 1 and 3
    }

    #[test]
    fn output_count_for_large_prune() {
        let n = 257;
        let totals: Vec<f32> = (0..n).map(|i| (i as f32 * 0.7).sin()).collect();
        let scores = scores_from_totals(1, &totals);
        let acts = rows(n, 4);
        let out = prune_tokens(&acts, &scores, 166).unwrap();
        assert_eq!(out.shape(), &[92, 4]); // 257 - 166 + 1
    }

    #[test]
    fn r_out_of_range_is_rejected() {
        let acts = rows(5, 2);
        let scores = scores_from_totals(1, &[0.0, 0.1, 0.2, 0.3, 0.4]);
        assert!(prune_tokens(&acts, &scores, 3).is_ok()); // keeps 1 informative
        assert!(prune_tokens(&acts, &scores, 4).is_err());
    }

    #[test]
    fn conservation_of_pruned_mass() {
        let mut rng = SplitMix64::new(15);
        let n = 24;
        let d = 8;
        let data: Vec<f32> = (0..n * d).map(|_| rng.next_symmetric(3.0)).collect();
        let acts = Tensor::new(vec![n, d], data).unwrap();
        let totals: Vec<f32> = (0..n).map(|_| rng.next_f32()).collect();
        let scores = scores_from_totals(2, &totals);
        let r = 9;
        let out = prune_tokens(&acts, &scores, r).unwrap();
        let out_n = n - r + 1;
        let kept: Vec<usize> = {
            let mut idx: Vec<usize> = (2..n).collect();
            idx.sort_by(|&i, &j| scores.total[j].total_cmp(&scores.total[i]).then(i.cmp(&j)));
            let mut kept: Vec<usize> = idx[..idx.len() - r].to_vec();
            kept.extend(0..2usize);
            kept.sort_unstable();
            kept
        };
        let pruned: Vec<usize> = (0..n).filter(|t| !kept.contains(t)).collect();
        for ch in 0..d {
            let sum: f32 = pruned.iter().map(|&t| acts.data()[t * d + ch]).sum();
            let inattentive = out.data()[(out_n - 1) * d + ch];
            assert!(
                (sum - r as f32 * inattentive).abs() < 1e-5,
                "channel {ch}: {sum} vs {}",
                r as f32 * inattentive
            );
        }
    }

    #[test]
    fn ties_keep_the_lower_index() {
        let acts = rows(5, 2);
        let scores = scores_from_totals(1, &[0.0, 0.5, 0.5, 0.5, 0.9]);
        let out = prune_tokens(&acts, &scores, 2).unwrap();
        // Prunable ranking: 4 (0.9), then 1, 2, 3 tied; keep 4 and 1.
        assert_eq!(out.shape(), &[4, 2]);
        assert_eq!(out.row(0), &[0.0, 0.0]); // special
        assert_eq!(out.row(1), &[1.0, 1.0]);
        assert_eq!(out.row(2), &[4.0, 4.0]);
        assert_eq!(out.row(3), &[2.5, 2.5]); // mean of rows 2 and 3
    }

    #[test]
    fn constant_shift_leaves_kept_set_unchanged() {
        let mut rng = SplitMix64::new(16);
        let totals: Vec<f32> = (0..12).map(|_| rng.next_f32()).collect();
        let acts = rows(12, 3);
        let base = prune_tokens(&acts, &scores_from_totals(1, &totals), 5).unwrap();
        let shifted: Vec<f32> = totals.iter().map(|v| v + 3.25).collect();
        let moved = prune_tokens(&acts, &scores_from_totals(1, &shifted), 5).unwrap();
        assert_eq!(base.data(), moved.data());
    }

    #[test]
    fn batch_dimension_is_handled_per_sample() {
        let scores = scores_from_totals(0, &[0.3, 0.1, 0.2]);
        let data: Vec<f32> = (0..2 * 3 * 2).map(|i| i as f32).collect();
        let acts = Tensor::new(vec![2, 3, 2], data).unwrap();
        let out = prune_tokens(&acts, &scores, 1).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2]);
        // Sample 0 keeps rows 0, 2 plus mean of row 1.
        assert_eq!(&out.data()[..6], &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0]);
        // Sample 1 identical structure over its own rows.
        assert_eq!(&out.data()[6..], &[6.0, 7.0, 10.0, 11.0, 8.0, 9.0]);
    }

    #[test]
    fn keep_subset_gathers_rows() {
        let acts = rows(6, 2);
        let hook = KeepSubset {
            layer_index: 0,
            kept: vec![0, 2, 5],
        };
        let cap = random_capture(1, 6, 2, 17);
        let out = hook.reduce(&cap, acts).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert_eq!(out.data(), &[0.0, 0.0, 2.0, 2.0, 5.0, 5.0]);

        let bad = KeepSubset {
            layer_index: 0,
            kept: vec![2, 2],
        };
        assert!(bad.reduce(&cap, rows(6, 2)).is_err());
    }
}
