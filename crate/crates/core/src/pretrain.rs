//! Pretraining objectives: subword MLM, character MLM and the
//! character-word matching loss, summed without weights.

use rand::Rng;

use crate::encoder::PaddedIds;
use crate::entangle::EntangledStates;
use crate::layers::{Linear, TrainRng};
use crate::model::{EntanglementModel, PairBatch};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenize::{char_word_labels, CharWordLabels, SpecialIds};

/// Logit assigned to subwords excluded from the matching softmax.
const EXCLUDED_LOGIT: f64 = -1e9;

pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Masked copy of a padded id batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input_ids: PaddedIds,
    /// Original id at masked positions, `None` elsewhere.
    pub targets: Vec<Option<usize>>,
    pub mask_positions: Vec<bool>,
}

impl MaskedBatch {
    pub fn num_masked(&self) -> usize {
        self.mask_positions.iter().filter(|&&m| m).count()
    }
}

/// Independently replaces each non-special, non-pad token by MASK with
/// probability `rate`.
pub fn mask_tokens<R: Rng + ?Sized>(ids: &PaddedIds, rate: f64, rng: &mut R) -> MaskedBatch {
    let sp = SpecialIds::FIXED;
    let mut input = ids.clone();
    let mut targets = vec![None; ids.ids.len()];
    let mut mask_positions = vec![false; ids.ids.len()];
    for (i, (&id, &valid)) in ids.ids.iter().zip(&ids.mask).enumerate() {
        if !valid || sp.is_special(id) {
            continue;
        }
        if rng.random::<f64>() < rate {
            input.ids[i] = sp.mask;
            targets[i] = Some(id);
            mask_positions[i] = true;
        }
    }
    MaskedBatch {
        input_ids: input,
        targets,
        mask_positions,
    }
}

/// Mean NLL of the original ids at masked positions, predicted from
/// `hidden` (`(B, L, d)`) through `projection` (`d -> V`). Zero when nothing
/// is masked.
pub fn mlm_loss(g: &mut Graph, s: &ParamStore, hidden: Var, targets: &[Option<usize>], projection: &Linear) -> Var {
    let rows: Vec<usize> = targets.iter().enumerate().filter_map(|(i, t)| t.map(|_| i)).collect();
    let picked_targets: Vec<Option<usize>> = rows.iter().map(|&i| targets[i]).collect();
    let picked = g.gather_rows(hidden, &rows);
    let logits = projection.forward(g, s, picked);
    g.cross_entropy(logits, &picked_targets)
}

/// Trainable positive temperature `a = exp(log_a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchingScale {
    pub log_a: ParamId,
}

impl MatchingScale {
    /// Registers `a` initialised to `initial` (must be positive).
    pub fn new(store: &mut ParamStore, initial: f64) -> Self {
        assert!(initial > 0.0, "matching scale must be positive");
        Self {
            log_a: store.add("pretrain.matching.log_a", Tensor::scalar(initial.ln())),
        }
    }

    pub fn value(&self, s: &ParamStore) -> f64 {
        s.value(self.log_a).item().exp()
    }
}

/// Character-word matching loss.
///
/// `S[i, j] = H^s[i] · H^c[j] / a`. For each valid character `j`, column
/// `S[:, j]` is a logit vector over the example's non-special subwords and
/// the target is the subword containing `j`. Mean over valid characters.
pub fn matching_loss(
    g: &mut Graph,
    s: &ParamStore,
    states: &EntangledStates,
    labels: &[CharWordLabels],
    subword_valid: &[Vec<bool>],
    scale: &MatchingScale,
) -> Var {
    let (b, ls, lc) = (states.batch, states.subword_len, states.char_len);
    assert_eq!(labels.len(), b, "one label set per example");
    // (B, Lc, Ls): row j of example b holds column j of that example's S.
    let dots = g.bmm_bt(states.char, states.subword);
    let log_a = g.param(s, scale.log_a);
    let neg = g.scale(log_a, -1.0);
    let inv_a = g.exp(neg);
    let scaled = g.scalar_mul(dots, inv_a);
    let mut bias = Tensor::zeros(&[b, lc, ls]);
    let mut targets = vec![None; b * lc];
    for bb in 0..b {
        for j in 0..lc {
            for i in 0..ls {
                let ok = subword_valid[bb].get(i).copied().unwrap_or(false);
                if !ok {
                    bias.data_mut()[(bb * lc + j) * ls + i] = EXCLUDED_LOGIT;
                }
            }
            let l = &labels[bb];
            if l.valid_mask.get(j).copied().unwrap_or(false) {
                targets[bb * lc + j] = Some(l.labels[j]);
            }
        }
    }
    let bias = g.constant(bias);
    let logits = g.add(scaled, bias);
    g.cross_entropy(logits, &targets)
}

/// MLM projections for both sides and the matching temperature.
#[derive(Debug, Clone)]
pub struct PretrainHeads {
    pub subword_mlm: Linear,
    pub char_mlm: Linear,
    pub scale: MatchingScale,
}

impl PretrainHeads {
    /// `a` starts at `sqrt(d)`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        d: usize,
        subword_vocab: usize,
        char_vocab: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            subword_mlm: Linear::new(store, "pretrain.mlm.sub", d, subword_vocab, std, rng),
            char_mlm: Linear::new(store, "pretrain.mlm.char", d, char_vocab, std, rng),
            scale: MatchingScale::new(store, (d as f64).sqrt()),
        }
    }
}

/// Loss nodes of one pretraining step.
#[derive(Debug, Clone, Copy)]
pub struct PretrainLosses {
    pub total: Var,
    pub matching: Var,
    pub subword_mlm: Var,
    pub char_mlm: Var,
}

/// Masks both sides, runs the model and sums the three objectives.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step<R: Rng>(
    g: &mut Graph,
    s: &ParamStore,
    model: &EntanglementModel,
    heads: &PretrainHeads,
    batch: &PairBatch<'_>,
    mask_rate: f64,
    mask_rng: &mut R,
    train_rng: TrainRng<'_>,
) -> crate::Result<PretrainLosses> {
    let sub_masked = mask_tokens(&batch.subwords, mask_rate, mask_rng);
    let char_masked = mask_tokens(&batch.chars, mask_rate, mask_rng);
    pretrain_losses(g, s, model, heads, batch, &sub_masked, &char_masked, train_rng)
}

/// Losses for already-masked inputs.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_losses(
    g: &mut Graph,
    s: &ParamStore,
    model: &EntanglementModel,
    heads: &PretrainHeads,
    batch: &PairBatch<'_>,
    sub_masked: &MaskedBatch,
    char_masked: &MaskedBatch,
    train_rng: TrainRng<'_>,
) -> crate::Result<PretrainLosses> {
    let masked = batch.with_inputs(sub_masked.input_ids.clone(), char_masked.input_ids.clone());
    let out = model.forward(g, s, &masked, train_rng)?;
    let states = &out.states;
    let subword_mlm = mlm_loss(g, s, states.subword, &sub_masked.targets, &heads.subword_mlm);
    let char_mlm = mlm_loss(g, s, states.char, &char_masked.targets, &heads.char_mlm);
    let labels: Vec<CharWordLabels> = batch.pairs.iter().map(|p| char_word_labels(p)).collect();
    let sub_valid: Vec<Vec<bool>> = batch
        .pairs
        .iter()
        .map(|p| p.subword_to_word.iter().map(Option::is_some).collect())
        .collect();
    let matching = matching_loss(g, s, states, &labels, &sub_valid, &heads.scale);
    let partial = g.add(matching, subword_mlm);
    let total = g.add(partial, char_mlm);
    Ok(PretrainLosses {
        total,
        matching,
        subword_mlm,
        char_mlm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn states_from(g: &mut Graph, hs: Vec<Vec<f64>>, hc: Vec<Vec<f64>>) -> EntangledStates {
        let (ls, lc, d) = (hs.len(), hc.len(), hs[0].len());
        let s = g.constant(Tensor::new(vec![1, ls, d], hs.concat()).unwrap());
        let c = g.constant(Tensor::new(vec![1, lc, d], hc.concat()).unwrap());
        EntangledStates {
            subword: s,
            char: c,
            subword_mask: vec![true; ls],
            char_mask: vec![true; lc],
            batch: 1,
            subword_len: ls,
            char_len: lc,
        }
    }

    fn hand_case(a: f64) -> f64 {
        let mut store = ParamStore::new();
        let scale = MatchingScale::new(&mut store, a);
        let mut g = Graph::new();
        let st = states_from(
            &mut g,
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let labels = CharWordLabels {
            labels: vec![0, 0, 1],
            valid_mask: vec![true; 3],
        };
        let loss = matching_loss(&mut g, &store, &st, &[labels], &[vec![true, true]], &scale);
        g.value(loss).item()
    }

    #[test]
    fn matching_closed_form() {
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((hand_case(1.0) - expect).abs() < 1e-12);
        assert!((expect - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn larger_temperature_moves_toward_uniform() {
        let l1 = hand_case(1.0);
        let l2 = hand_case(2.0);
        let l4 = hand_case(4.0);
        assert!(l1 < l2 && l2 < l4 && l4 < 2f64.ln());
    }

    #[test]
    fn identical_subwords_give_ln_n() {
        let mut store = ParamStore::new();
        let scale = MatchingScale::new(&mut store, 1.5);
        let mut g = Graph::new();
        let st = states_from(&mut g, vec![vec![0.3, 0.7]; 3], vec![vec![1.0, -2.0], vec![0.5, 0.1]]);
        let labels = CharWordLabels {
            labels: vec![2, 0],
            valid_mask: vec![true, true],
        };
        let loss = matching_loss(&mut g, &store, &st, &[labels], &[vec![true; 3]], &scale);
        assert!((g.value(loss).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn no_valid_characters_is_zero() {
        let mut store = ParamStore::new();
        let scale = MatchingScale::new(&mut store, 1.0);
        let mut g = Graph::new();
        let st = states_from(&mut g, vec![vec![1.0]], vec![vec![1.0], vec![2.0]]);
        let labels = CharWordLabels {
            labels: vec![0, 0],
            valid_mask: vec![false, false],
        };
        let loss = matching_loss(&mut g, &store, &st, &[labels], &[vec![true]], &scale);
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn masking_skips_specials_and_padding() {
        let ids = PaddedIds::from_sequences(&[&[2, 7, 8, 3], &[2, 9, 3]]);
        let m = mask_tokens(&ids, 0.999_999, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(
            m.mask_positions,
            vec![false, true, true, false, false, true, false, false]
        );
        assert_eq!(m.targets[1], Some(7));
        assert_eq!(m.input_ids.ids[1], SpecialIds::FIXED.mask);
        assert_eq!(m.input_ids.ids[7], SpecialIds::FIXED.pad);
    }

    #[test]
    fn masking_is_seeded() {
        let seq: Vec<usize> = (5..60).collect();
        let ids = PaddedIds::from_sequences(&[&seq]);
        let a = mask_tokens(&ids, 0.15, &mut ChaCha8Rng::seed_from_u64(9));
        let b = mask_tokens(&ids, 0.15, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn mask_rate_concentrates() {
        // Binomial(10_000, 0.15): sd ≈ 0.0036, so [0.13, 0.17] is > 5 sd.
        let seq: Vec<usize> = (0..10_000).map(|i| 5 + i % 50).collect();
        let ids = PaddedIds::from_sequences(&[&seq]);
        for seed in 0..5 {
            let m = mask_tokens(&ids, 0.15, &mut ChaCha8Rng::seed_from_u64(seed));
            let frac = m.num_masked() as f64 / 10_000.0;
            assert!((0.13..=0.17).contains(&frac), "fraction {frac}");
        }
    }

    #[test]
    fn tiny_rate_usually_masks_nothing_and_loss_is_zero() {
        let ids = PaddedIds::from_sequences(&[&[2, 7, 8, 3]]);
        let m = mask_tokens(&ids, 1e-12, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(m.num_masked(), 0);
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "p", 2, 10, 0.1, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let h = g.constant(Tensor::full(&[1, 4, 2], 0.5));
        let loss = mlm_loss(&mut g, &store, h, &m.targets, &proj);
        assert_eq!(g.value(loss).item(), 0.0);
        g.backward(loss, &mut store).unwrap();
        assert!(store.grad(proj.weight).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mlm_uniform_logits_give_ln_v() {
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "p", 3, 12, 0.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let h = g.constant(Tensor::full(&[1, 3, 3], 0.4));
        let loss = mlm_loss(&mut g, &store, h, &[None, Some(7), Some(2)], &proj);
        assert!((g.value(loss).item() - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_matches_loop_oracle_and_has_no_leakage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "p", 3, 5, 0.8, &mut rng);
        let hv: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hid = store.add("h", Tensor::new(vec![1, 4, 3], hv.clone()).unwrap());
        let targets = [None, Some(3), None, Some(0)];
        let mut g = Graph::new();
        let h = g.param(&store, hid);
        let loss = mlm_loss(&mut g, &store, h, &targets, &proj);
        let w = store.value(proj.weight).clone();
        let mut expect = 0.0;
        for (pos, t) in [(1usize, 3usize), (3, 0)] {
            let logits: Vec<f64> = (0..5)
                .map(|v| (0..3).map(|c| hv[pos * 3 + c] * w.data()[c * 5 + v]).sum::<f64>())
                .collect();
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            expect -= (logits[t].exp() / z).ln();
        }
        assert!((g.value(loss).item() - expect / 2.0).abs() < 1e-12);
        g.backward(loss, &mut store).unwrap();
        let gh = store.grad(hid);
        assert!(gh.data()[0..3].iter().all(|&x| x == 0.0));
        assert!(gh.data()[6..9].iter().all(|&x| x == 0.0));
    }
}
