//! Group-relative policy optimization: sample a group of responses per
//! prompt from a frozen snapshot, normalize rewards within the group into
//! advantages, and ascend the ratio-weighted objective
//! `mean(exp(logp_new - logp_old) * advantage)` over whole sequences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{generate, DecodeMode, EOS};
use crate::model::{align_on_tape, ModelError, ModelIds, ModelParams, model_tensors_mut};
use crate::numerics::{GradTape, NumericsError, TensorId};
use crate::par;
use crate::rewards::{composite_reward, parse_response, RewardBreakdown, RewardError, TaskSpec};
use crate::ts_pipeline::TimeSeriesSet;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group size {0} is below the minimum of 2")]
    GroupTooSmall(usize),
    #[error("group has {rewards} rewards for {rollouts} rollouts")]
    MissingRewards { rewards: usize, rollouts: usize },
    #[error("advantages not computed for this group")]
    AdvantagesNotComputed,
    #[error("stale advantages: group sampled at policy version {group}, snapshot is {snapshot}")]
    StaleAdvantages { group: u64, snapshot: u64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// One training prompt: the tokenized question, its series, and the scoring
/// rule for responses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlPrompt {
    pub id: usize,
    pub question: Vec<usize>,
    pub ts: TimeSeriesSet,
    pub task: TaskSpec,
}

/// One sampled response with its log-probabilities under the snapshot that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
}

/// G rollouts of one prompt plus their group statistics.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt: RlPrompt,
    pub policy_version: u64,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<RewardBreakdown>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-rollout seed independent of scheduling order.
fn rollout_seed(seed: u64, prompt_id: usize, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(prompt_id as u64) ^ splitmix64((index as u64) << 32))
}

/// Samples `group_size` temperature rollouts from the frozen snapshot.
/// Rewards and advantages stay unfilled.
pub fn sample_group(
    snapshot: &ModelParams,
    prompt: &RlPrompt,
    group_size: usize,
    temperature: f64,
    max_new: usize,
    seed: u64,
) -> Result<RolloutGroup, GrpoError> {
    if group_size < 2 {
        return Err(GrpoError::GroupTooSmall(group_size));
    }
    let base = crate::model::prompt_for(snapshot, &prompt.question, &prompt.ts)?;
    let indices: Vec<usize> = (0..group_size).collect();
    let results = par::map_collect(&indices, |&i| {
        generate(
            &snapshot.backbone,
            &base,
            DecodeMode::Temperature(temperature),
            max_new,
            rollout_seed(seed, prompt.id, i),
        )
        .map(|g| Rollout { tokens: g.tokens, logprobs: g.logprobs })
    });
    let mut rollouts = Vec::with_capacity(group_size);
    for r in results {
        rollouts.push(r.map_err(ModelError::from)?);
    }
    Ok(RolloutGroup {
        prompt: prompt.clone(),
        policy_version: snapshot.backbone.version,
        rollouts,
        rewards: Vec::new(),
        mean: 0.0,
        std: 0.0,
        advantages: Vec::new(),
    })
}

/// Scores every rollout with the composite reward.
pub fn fill_rewards(
    group: &mut RolloutGroup,
    model: &ModelParams,
    balanced: bool,
) -> Result<(), GrpoError> {
    let mut rewards = Vec::with_capacity(group.rollouts.len());
    for r in &group.rollouts {
        let text = model.vocab.decode(&r.tokens);
        rewards.push(composite_reward(&parse_response(&text), &group.prompt.task, balanced)?);
    }
    group.rewards = rewards;
    Ok(())
}

/// Group-normalized advantages: `(total - mean) / (population std + eps)`.
pub fn compute_advantages(group: &mut RolloutGroup, eps: f64) -> Result<(), GrpoError> {
    let g = group.rollouts.len();
    if group.rewards.len() != g {
        return Err(GrpoError::MissingRewards { rewards: group.rewards.len(), rollouts: g });
    }
    let totals: Vec<f64> = group.rewards.iter().map(|r| r.total).collect();
    let mean = totals.iter().sum::<f64>() / g as f64;
    let var = totals.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    group.mean = mean;
    group.std = std;
    group.advantages = totals.iter().map(|t| (t - mean) / (std + eps)).collect();
    Ok(())
}

/// Builds `ratio * advantage` for one rollout on `tape`: realigns the prompt,
/// recomputes the sequence log-probability under the live parameters, and
/// exponentiates the difference from the stored snapshot value.
pub fn rollout_objective(
    tape: &mut GradTape,
    ids: &ModelIds,
    model: &ModelParams,
    prompt: &RlPrompt,
    rollout: &Rollout,
    advantage: f64,
    clip: Option<f64>,
) -> Result<TensorId, GrpoError> {
    let aligned = align_on_tape(tape, ids, model, &prompt.question, &prompt.ts)
        .map_err(ModelError::from)?;
    let prefix_len = tape.value(aligned.seq.embeddings).rows();
    let logits = crate::backbone::forward(
        tape,
        &ids.policy,
        &model.backbone.cfg,
        crate::backbone::SeqSource::RowsThenTokens(aligned.seq.embeddings, &rollout.tokens),
    )
    .map_err(ModelError::from)?;
    let scored = tape.slice_rows(logits, prefix_len - 1, prefix_len - 1 + rollout.tokens.len())?;
    let pairs: Vec<(usize, usize)> = rollout.tokens.iter().copied().enumerate().collect();
    let lp_new = tape.log_prob_sum(scored, &pairs)?;
    let lp_old: f64 = rollout.logprobs.iter().sum();
    let diff = tape.add_scalar(lp_new, -lp_old)?;
    let ratio = tape.exp(diff)?;
    let ratio = match clip {
        Some(c) => tape.clamp(ratio, 1.0 - c, 1.0 + c)?,
        None => ratio,
    };
    Ok(tape.scale(ratio, advantage)?)
}

/// Live and snapshot parameters plus the reward trace.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelParams,
    pub old: ModelParams,
    pub step: usize,
    pub updates_since_refresh: usize,
    pub raw_history: Vec<f64>,
    pub smoothed: Option<f64>,
}

impl TrainState {
    pub fn new(model: ModelParams) -> Self {
        let old = model.clone();
        TrainState {
            model,
            old,
            step: 0,
            updates_since_refresh: 0,
            raw_history: Vec::new(),
            smoothed: None,
        }
    }
}

/// `(1-alpha) * previous + alpha * raw`; the first observation seeds the
/// average directly.
pub fn ema_step(prev: Option<f64>, raw: f64, alpha: f64) -> f64 {
    match prev {
        None => raw,
        Some(s) => (1.0 - alpha) * s + alpha * raw,
    }
}

/// One gradient-ascent step on the mean ratio-weighted advantage over all
/// rollouts in `groups`. Returns the objective value. Refreshes the old
/// snapshot once `inner_steps` updates have been taken against it.
pub fn policy_update(
    state: &mut TrainState,
    groups: &[RolloutGroup],
    lr: f64,
    clip: Option<f64>,
    inner_steps: usize,
) -> Result<f64, GrpoError> {
    for g in groups {
        if g.advantages.len() != g.rollouts.len() {
            return Err(GrpoError::AdvantagesNotComputed);
        }
        if g.policy_version != state.old.backbone.version {
            return Err(GrpoError::StaleAdvantages {
                group: g.policy_version,
                snapshot: state.old.backbone.version,
            });
        }
    }
    let items: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| (0..g.rollouts.len()).map(move |ri| (gi, ri)))
        .collect();
    if items.is_empty() {
        return Err(GrpoError::EmptyDataset);
    }
    let model = &state.model;
    // Per-rollout tapes so groups evaluate in parallel; gradients average in
    // a fixed order afterwards, keeping the update bit-deterministic.
    let per_rollout = par::map_collect(&items, |&(gi, ri)| -> Result<(f64, Vec<Vec<f64>>), GrpoError> {
        let g = &groups[gi];
        let mut tape = GradTape::new();
        let ids = ModelIds::record(&mut tape, model, true);
        let obj = rollout_objective(
            &mut tape,
            &ids,
            model,
            &g.prompt,
            &g.rollouts[ri],
            g.advantages[ri],
            clip,
        )?;
        let value = tape.value(obj).data()[0];
        tape.backward(obj)?;
        let grads = ids
            .all()
            .into_iter()
            .map(|id| tape.grad(id).expect("trainable leaf has gradient").to_vec())
            .collect();
        Ok((value, grads))
    });
    let n = items.len() as f64;
    let mut objective = 0.0;
    let mut mean_grads: Option<Vec<Vec<f64>>> = None;
    for r in per_rollout {
        let (value, grads) = r?;
        objective += value;
        match &mut mean_grads {
            None => mean_grads = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
    }
    objective /= n;
    let mean_grads = mean_grads.expect("non-empty items");
    for (tensor, grad) in model_tensors_mut(&mut state.model).into_iter().zip(&mean_grads) {
        for (p, g) in tensor.data_mut().iter_mut().zip(grad) {
            *p += lr * *g / n;
        }
    }
    state.model.backbone.version += 1;
    state.updates_since_refresh += 1;
    if state.updates_since_refresh >= inner_steps.max(1) {
        state.old = state.model.clone();
        state.updates_since_refresh = 0;
    }
    Ok(objective)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub steps: usize,
    pub group_size: usize,
    pub prompts_per_step: usize,
    pub temperature: f64,
    pub max_new: usize,
    pub lr: f64,
    pub clip: Option<f64>,
    pub epsilon: f64,
    pub ema_alpha: f64,
    pub balanced_rewards: bool,
    pub inner_steps: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            steps: 60,
            group_size: 8,
            prompts_per_step: 2,
            temperature: 0.8,
            max_new: 24,
            lr: 2e-3,
            clip: None,
            epsilon: 1e-4,
            ema_alpha: 0.04,
            balanced_rewards: true,
            inner_steps: 1,
            seed: 0,
        }
    }
}

/// One point of the reward curve file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub raw_reward: f64,
    pub ema_reward: f64,
}

/// The reinforcement stage: loop prompt batches through sample, score,
/// normalize, update; track raw and smoothed rewards per step.
pub fn train_rl(
    model: ModelParams,
    dataset: &[RlPrompt],
    cfg: &RlConfig,
) -> Result<(TrainState, Vec<CurvePoint>), GrpoError> {
    if dataset.is_empty() {
        return Err(GrpoError::EmptyDataset);
    }
    let mut state = TrainState::new(model);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut groups = Vec::with_capacity(cfg.prompts_per_step);
        for j in 0..cfg.prompts_per_step {
            let prompt = &dataset[(step * cfg.prompts_per_step + j) % dataset.len()];
            let mut group = sample_group(
                &state.old,
                prompt,
                cfg.group_size,
                cfg.temperature,
                cfg.max_new,
                splitmix64(cfg.seed ^ (step as u64)),
            )?;
            fill_rewards(&mut group, &state.old, cfg.balanced_rewards)?;
            compute_advantages(&mut group, cfg.epsilon)?;
            groups.push(group);
        }
        let raw: f64 = groups
            .iter()
            .flat_map(|g| g.rewards.iter().map(|r| r.total))
            .sum::<f64>()
            / (cfg.prompts_per_step * cfg.group_size) as f64;
        policy_update(&mut state, &groups, cfg.lr, cfg.clip, cfg.inner_steps)?;
        let ema = ema_step(state.smoothed, raw, cfg.ema_alpha);
        state.smoothed = Some(ema);
        state.raw_history.push(raw);
        state.step = step + 1;
        curve.push(CurvePoint { step, raw_reward: raw, ema_reward: ema });
    }
    Ok((state, curve))
}

/// Greedy response decoded to text; shared by evaluation and tests.
pub fn greedy_response_text(
    model: &ModelParams,
    question: &[usize],
    ts: &TimeSeriesSet,
    max_new: usize,
) -> Result<String, GrpoError> {
    let gen = crate::model::respond(model, question, ts, DecodeMode::Greedy, max_new, 0)?;
    let _ = EOS;
    Ok(model.vocab.decode(&gen.tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AlignmentMode;
    use crate::backbone::{BackboneConfig, Vocab};
    use crate::ts_pipeline::PipelineConfig;

    fn tiny_model(seed: u64) -> ModelParams {
        let vocab = Vocab::with_words(["up", "down", "a", "b", "true", "false"]);
        ModelParams::seeded(
            vocab,
            BackboneConfig { dim: 16, heads: 2, blocks: 1, ffn_hidden: 32, max_len: 48 },
            PipelineConfig { patch_len: 4, window: 3, dim: 16 },
            2,
            2,
            false,
            AlignmentMode::ThreePattern,
            8,
            seed,
        )
        .unwrap()
    }

    fn tiny_prompt(model: &ModelParams, id: usize) -> RlPrompt {
        RlPrompt {
            id,
            question: model.vocab.encode("up <ts><ts/> down"),
            ts: TimeSeriesSet::new(vec![vec![0.1, 0.6, 1.1, 0.2, 0.9, 1.4, 0.3, 1.8]]).unwrap(),
            task: TaskSpec::Labeled {
                candidates: vec!["true".into(), "false".into()],
                gold: "true".into(),
            },
        }
    }

    fn filled_group(model: &ModelParams, rewards: &[f64]) -> RolloutGroup {
        let prompt = tiny_prompt(model, 0);
        let mut group = sample_group(model, &prompt, rewards.len(), 0.9, 6, 3).unwrap();
        group.rewards = rewards
            .iter()
            .map(|&t| RewardBreakdown { format: 0.0, task: t, stages: Vec::new(), total: t })
            .collect();
        group
    }

    #[test]
    fn advantages_match_hand_computation() {
        let model = tiny_model(1);
        let mut group = filled_group(&model, &[2.0, 1.0, 0.0]);
        compute_advantages(&mut group, 1e-4).unwrap();
        let sigma = (2.0f64 / 3.0).sqrt();
        assert!((group.mean - 1.0).abs() < 1e-15);
        assert!((group.std - sigma).abs() < 1e-15);
        assert!((group.advantages[0] - 1.2246).abs() < 1e-3);
        assert!(group.advantages[1].abs() < 1e-15);
        assert!((group.advantages[2] + 1.2246).abs() < 1e-3);
        let sum: f64 = group.advantages.iter().sum();
        assert!(sum.abs() <= 1e-9 * 3.0);
        // Population std of the advantages shrinks by sigma/(sigma+eps).
        let m: f64 = sum / 3.0;
        let var: f64 =
            group.advantages.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 3.0;
        let expect = sigma / (sigma + 1e-4);
        assert!((var.sqrt() - expect).abs() <= 1e-6);
    }

    #[test]
    fn equal_rewards_zero_advantages() {
        let model = tiny_model(2);
        let mut group = filled_group(&model, &[1.3, 1.3, 1.3, 1.3]);
        compute_advantages(&mut group, 1e-4).unwrap();
        assert!(group.advantages.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn advantages_are_shift_invariant() {
        let model = tiny_model(3);
        let mut a = filled_group(&model, &[2.0, 1.0, 0.5, 0.0]);
        let mut b = filled_group(&model, &[2.5, 1.5, 1.0, 0.5]);
        compute_advantages(&mut a, 1e-4).unwrap();
        compute_advantages(&mut b, 1e-4).unwrap();
        for (x, y) in a.advantages.iter().zip(&b.advantages) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn sampling_is_seeded_and_bounded() {
        let model = tiny_model(4);
        let prompt = tiny_prompt(&model, 7);
        let a = sample_group(&model, &prompt, 3, 0.8, 8, 11).unwrap();
        let b = sample_group(&model, &prompt, 3, 0.8, 8, 11).unwrap();
        assert_eq!(a.rollouts, b.rollouts);
        let c = sample_group(&model, &prompt, 3, 0.8, 8, 12).unwrap();
        assert_ne!(a.rollouts, c.rollouts);
        assert!(matches!(
            sample_group(&model, &prompt, 1, 0.8, 8, 0),
            Err(GrpoError::GroupTooSmall(1))
        ));
        // Minimal group boundary.
        assert!(sample_group(&model, &prompt, 2, 0.8, 8, 0).is_ok());
    }

    #[test]
    fn stored_logprobs_match_fresh_recomputation() {
        let model = tiny_model(5);
        let prompt = tiny_prompt(&model, 1);
        let group = sample_group(&model, &prompt, 2, 1.1, 8, 21).unwrap();
        let base = crate::model::prompt_for(&model, &prompt.question, &prompt.ts).unwrap();
        for r in &group.rollouts {
            let again =
                crate::backbone::sequence_logprobs(&model.backbone, &base, &r.tokens).unwrap();
            for (a, b) in r.logprobs.iter().zip(&again) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn objective_at_snapshot_equals_mean_advantage() {
        let model = tiny_model(6);
        let mut group = filled_group(&model, &[2.0, 0.5, 0.25]);
        compute_advantages(&mut group, 1e-4).unwrap();
        let mean_adv: f64 =
            group.advantages.iter().sum::<f64>() / group.advantages.len() as f64;
        let mut state = TrainState::new(model);
        let obj = policy_update(&mut state, &[group], 0.0, None, 1).unwrap();
        assert!(
            (obj - mean_adv).abs() <= 1e-9,
            "objective {obj} vs mean advantage {mean_adv}"
        );
    }

    #[test]
    fn zero_advantages_leave_parameters_unchanged() {
        let model = tiny_model(7);
        let mut group = filled_group(&model, &[1.0, 1.0, 1.0]);
        compute_advantages(&mut group, 1e-4).unwrap();
        let mut state = TrainState::new(model.clone());
        policy_update(&mut state, &[group], 0.05, None, 1).unwrap();
        // Version bumped, numbers untouched.
        assert_eq!(state.model.backbone.version, model.backbone.version + 1);
        let before = model.backbone.tensors();
        let after = state.model.backbone.tensors();
        for (a, b) in before.iter().zip(after) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn stale_groups_are_rejected() {
        let model = tiny_model(8);
        let mut group = filled_group(&model, &[1.5, 0.5]);
        compute_advantages(&mut group, 1e-4).unwrap();
        let mut state = TrainState::new(model);
        // Take one real update so the snapshot version moves past the group's.
        let mut fresh = filled_group(&state.old, &[1.0, 0.0]);
        compute_advantages(&mut fresh, 1e-4).unwrap();
        policy_update(&mut state, &[fresh], 0.01, None, 1).unwrap();
        assert!(matches!(
            policy_update(&mut state, &[group], 0.01, None, 1),
            Err(GrpoError::StaleAdvantages { .. })
        ));
    }

    #[test]
    fn advantages_required_before_update() {
        let model = tiny_model(9);
        let group = filled_group(&model, &[1.0, 0.0]);
        let mut state = TrainState::new(model);
        assert!(matches!(
            policy_update(&mut state, &[group], 0.01, None, 1),
            Err(GrpoError::AdvantagesNotComputed)
        ));
    }

    #[test]
    fn objective_gradient_passes_finite_difference() {
        use crate::numerics::check_gradient;
        let model = tiny_model(10);
        let mut group = filled_group(&model, &[2.0, 0.25]);
        compute_advantages(&mut group, 1e-4).unwrap();
        // Check against the output projection and one alignment bank.
        let err = check_gradient(
            |tape, leaf| {
                let mut ids = ModelIds::record(tape, &model, false);
                ids.policy.w_out = leaf;
                let mut parts = Vec::new();
                for (ri, r) in group.rollouts.iter().enumerate() {
                    let obj = rollout_objective(
                        tape,
                        &ids,
                        &model,
                        &group.prompt,
                        r,
                        group.advantages[ri],
                        None,
                    )
                    .map_err(|e| NumericsError::InvalidArgument {
                        op: "rollout_objective",
                        detail: e.to_string(),
                    })?;
                    parts.push(obj);
                }
                let sum = tape.add(parts[0], parts[1])?;
                tape.scale(sum, 0.5)
            },
            &model.backbone.w_out,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "w_out err={err}");

        let err = check_gradient(
            |tape, leaf| {
                let mut ids = ModelIds::record(tape, &model, false);
                ids.align.bank[0] = leaf;
                let obj = rollout_objective(
                    tape,
                    &ids,
                    &model,
                    &group.prompt,
                    &group.rollouts[0],
                    group.advantages[0],
                    None,
                )
                .map_err(|e| NumericsError::InvalidArgument {
                    op: "rollout_objective",
                    detail: e.to_string(),
                })?;
                Ok(obj)
            },
            &model.alignment.bank.q_full,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "bank err={err}");
    }

    #[test]
    fn clip_bounds_the_ratio() {
        let model = tiny_model(11);
        let mut group = filled_group(&model, &[2.0, 0.0]);
        compute_advantages(&mut group, 1e-4).unwrap();
        // At the snapshot the ratio is exactly 1, inside any clip band, so
        // the objective must match the unclipped value.
        let mut s1 = TrainState::new(model.clone());
        let o1 = policy_update(&mut s1, &[group.clone()], 0.0, Some(0.2), 1).unwrap();
        let mut s2 = TrainState::new(model);
        let o2 = policy_update(&mut s2, &[group], 0.0, None, 1).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_step(None, 1.0, 0.04), 1.0);
        assert_eq!(ema_step(Some(1.0), 1.0, 0.04), 1.0);
        let v = ema_step(Some(0.5), 1.0, 0.04);
        assert!((v - 0.52).abs() <= 1e-12);
    }

    #[test]
    fn train_rl_runs_and_is_deterministic() {
        let model = tiny_model(12);
        let dataset = vec![tiny_prompt(&model, 0), tiny_prompt(&model, 1)];
        let cfg = RlConfig {
            steps: 3,
            group_size: 2,
            prompts_per_step: 1,
            max_new: 6,
            ..RlConfig::default()
        };
        let (state_a, curve_a) = train_rl(model.clone(), &dataset, &cfg).unwrap();
        let (state_b, curve_b) = train_rl(model, &dataset, &cfg).unwrap();
        assert_eq!(curve_a, curve_b);
        assert_eq!(state_a.model, state_b.model);
        assert_eq!(curve_a.len(), 3);
        assert!(state_a.smoothed.is_some());
        assert!(matches!(
            train_rl(state_a.model, &[], &RlConfig::default()),
            Err(GrpoError::EmptyDataset)
        ));
    }
}
