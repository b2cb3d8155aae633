//! Patient-level splitting, segmentation training with the combined loss,
//! greedy lambda search and the loss-term ablation harness.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::critic::FrozenCritic;
use crate::data::{LabelMap, PolarImage, ProbMap, Record};
use crate::losses::{combine, combined_loss, LossConfig, Term, TermValues, LAMBDA_MAX, LAMBDA_MIN, TERM_NAMES};
use crate::metrics::{evaluate, mean_report, thin_wall_alines, EvalReport};
use crate::nn::{probs_to_tensor, tensor_to_probs, Normalization, RmsProp, RmsPropConfig};
use crate::par::{map_indexed, Exec};
use crate::phantom::mix_seed;
use crate::postprocess::{clean, CleanConfig};
use crate::segnet::{SegModel, SegNet, SegNetConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !(*f >= 0.0)) || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split fractions {all:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub patients: BTreeMap<String, Partition>,
}

impl SplitAssignment {
    pub fn partition_of(&self, patient: &str) -> Option<Partition> {
        self.patients.get(patient).copied()
    }

    pub fn count(&self, part: Partition) -> usize {
        self.patients.values().filter(|&&p| p == part).count()
    }

    /// Indices of the records whose patient falls in `part`.
    pub fn indices(&self, records: &[Record], part: Partition) -> Vec<usize> {
        (0..records.len()).filter(|&i| self.partition_of(&records[i].patient_id) == Some(part)).collect()
    }
}

/// Random partition of the distinct patient IDs. Validation and test each get
/// the rounded fraction of patients (at least one); training gets the rest.
pub fn split_by_patient<S: AsRef<str>>(patient_ids: &[S], fractions: &SplitFractions, seed: u64) -> Result<SplitAssignment> {
    fractions.validate()?;
    let unique: BTreeSet<&str> = patient_ids.iter().map(|s| s.as_ref()).collect();
    let n = unique.len();
    if n < 3 {
        return Err(Error::TooFewPatients { found: n });
    }
    let take = |f: f64| ((n as f64 * f).round() as usize).max(1);
    let (n_val, n_test) = (take(fractions.val), take(fractions.test));
    if n_val + n_test >= n {
        return Err(Error::TooFewPatients { found: n });
    }
    let mut order: Vec<&str> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n - n_val - n_test;
    let patients = order
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let part = if k < n_train {
                Partition::Train
            } else if k < n_train + n_val {
                Partition::Val
            } else {
                Partition::Test
            };
            (p.to_string(), part)
        })
        .collect();
    Ok(SplitAssignment { patients })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optimizer: RmsPropConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation Dice improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Seed of the patient split, kept apart from `seed` so training runs with
    /// different seeds share one split.
    pub split_seed: u64,
    pub split: SplitFractions,
    pub augment: AugmentConfig,
    pub augment_enabled: bool,
    pub segnet: SegNetConfig,
    pub data: Option<PathBuf>,
    pub critic_ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            optimizer: RmsPropConfig::default(),
            batch_size: 20,
            epochs: 30,
            patience: 10,
            seed: 0,
            split_seed: 0,
            split: SplitFractions::default(),
            augment: AugmentConfig::default(),
            augment_enabled: true,
            segnet: SegNetConfig::default(),
            data: None,
            critic_ckpt: None,
            out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.split.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-step term values (unweighted) and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub terms: TermValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_dice: f64,
    pub val_mhd_px: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation Dice.
    pub model: SegModel,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

pub fn step_log_csv(steps: &[StepLog]) -> String {
    let mut s = format!("epoch,step,total,{}\n", TERM_NAMES.join(","));
    for row in steps {
        s.push_str(&format!("{},{},{}", row.epoch, row.step, row.total));
        for v in row.terms.as_array() {
            s.push(',');
            if let Some(v) = v {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    s
}

fn labelled(record: &Record) -> Result<&LabelMap> {
    record.labels.as_ref().ok_or_else(|| Error::InvalidConfig(format!("record of patient {} has no labels", record.patient_id)))
}

fn check_critic(critic: Option<&FrozenCritic>, loss: &LossConfig, r: usize, a: usize) -> Result<()> {
    if loss.lambda_ap == 0.0 {
        return Ok(());
    }
    let c = critic.ok_or(Error::MissingCritic)?;
    let cfg = &c.critic.config;
    if (cfg.r, cfg.a) != (r, a) {
        return Err(Error::ShapeMismatch(format!("critic expects {}x{}, data is {r}x{a}", cfg.r, cfg.a)));
    }
    Ok(())
}

/// Loss, its parameter gradient and the logged term values for one batch.
pub fn batch_gradient(
    model: &SegModel,
    batch: &[(PolarImage, LabelMap)],
    loss: &LossConfig,
    critic: Option<&FrozenCritic>,
    exec: Exec,
) -> Result<(f64, Vec<f32>, TermValues)> {
    let net = &model.net;
    let use_ap = loss.lambda_ap != 0.0;
    let fwd = map_indexed(exec, batch.len(), |k| -> Result<_> {
        let (image, _) = &batch[k];
        let x = model.norm.image_tensor::<f32>(image);
        let (probs, cache) = net.forward(&model.params, &x)?;
        let pm = ProbMap::new_unchecked(image.r, image.a, tensor_to_probs(&probs));
        let ap = match (use_ap, critic) {
            (true, Some(c)) => Some(c.ap_loss(image, &pm)?),
            (true, None) => return Err(Error::MissingCritic),
            _ => None,
        };
        Ok((pm, cache, ap))
    });
    let fwd = fwd.into_iter().collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let pms: Vec<&ProbMap> = fwd.iter().map(|f| &f.0).collect();
    let yhat = ProbMap::concat_angular(&pms);
    let y = LabelMap::concat_angular(&batch.iter().map(|b| &b.1).collect::<Vec<_>>());
    let ap = if use_ap {
        let value = fwd.iter().map(|f| f.2.as_ref().map_or(0.0, |t| t.value)).sum::<f64>() / n;
        let grads: Vec<ProbMap> = fwd
            .iter()
            .map(|f| {
                let g = f.2.as_ref().map_or(&[][..], |t| &t.grad[..]);
                ProbMap::new_unchecked(f.0.r, f.0.a, g.iter().map(|v| v / n).collect())
            })
            .collect();
        Some(Term { value, grad: ProbMap::concat_angular(&grads.iter().collect::<Vec<_>>()).probs })
    } else {
        None
    };
    let (term, values) = combined_loss(&y, &yhat, ap, loss)?;
    let total = combine(&values, loss)?;
    let r = yhat.r;
    let widths: Vec<usize> = batch.iter().map(|b| b.0.a).collect();
    let parts = ProbMap::split_angular(&term.grad, r, &widths);
    let grads = map_indexed(exec, batch.len(), |k| {
        let dprobs = probs_to_tensor::<f32>(&parts[k], r, widths[k]);
        let mut g = vec![0.0f32; model.params.len()];
        net.backward(&model.params, &fwd[k].1, &dprobs, &mut g);
        g
    });
    let mut grad = vec![0.0f32; model.params.len()];
    for g in grads {
        grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
    }
    if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { term: "gradient", value: *bad as f64 });
    }
    Ok((total, grad, values))
}

/// Evaluates `model` on `records`, optionally post-processing predictions
/// and excluding A-lines whose wall is thicker than `max_wall_px`.
pub fn evaluate_model(
    model: &SegModel,
    records: &[&Record],
    postprocess: bool,
    max_wall_px: Option<usize>,
    exec: Exec,
) -> Result<Vec<EvalReport>> {
    map_indexed(exec, records.len(), |k| {
        let rec = records[k];
        let y = labelled(rec)?;
        let probs = model.predict(&rec.image)?;
        let yhat = if postprocess { clean(&probs, &CleanConfig::for_grid(y.r, y.a)) } else { probs.argmax() };
        let keep = max_wall_px.map(|m| thin_wall_alines(y, m));
        Ok(evaluate(y, &yhat, rec.image.pixel_pitch_um, keep.as_deref()))
    })
    .into_iter()
    .collect()
}

fn summary(reports: &[EvalReport]) -> (f64, Option<f64>) {
    mean_report(reports).map_or((0.0, None), |m| (m.dice, m.mhd_px))
}

/// Trains a fresh network on the training partition, keeping the parameters
/// with the best mean validation Dice.
pub fn train(
    records: &[Record],
    split: &SplitAssignment,
    cfg: &TrainConfig,
    critic: Option<&FrozenCritic>,
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = split.indices(records, Partition::Train);
    let val_idx = split.indices(records, Partition::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::InvalidConfig("training and validation partitions must be non-empty".into()));
    }
    let (r, a) = (records[train_idx[0]].image.r, records[train_idx[0]].image.a);
    for &i in train_idx.iter().chain(&val_idx) {
        labelled(&records[i])?;
        if (records[i].image.r, records[i].image.a) != (r, a) {
            return Err(Error::ShapeMismatch("all records must share one grid".into()));
        }
    }
    check_critic(critic, &cfg.loss, r, a)?;
    let net = SegNet::new(cfg.segnet);
    net.check_shape(r, a)?;
    let norm = Normalization::fit(train_idx.iter().map(|&i| &records[i].image));
    let mut model = SegModel { params: net.init_params(mix_seed(cfg.seed, 1)), net, norm };
    let mut opt = RmsProp::new(cfg.optimizer, model.params.len());
    let val: Vec<&Record> = val_idx.iter().map(|&i| &records[i]).collect();

    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1000 + epoch as u64)));
        let mut loss_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for idx in &batches {
            let batch = map_indexed(exec, idx.len(), |k| -> Result<(PolarImage, LabelMap)> {
                let rec = &records[idx[k]];
                let y = labelled(rec)?;
                if cfg.augment_enabled {
                    let seed = mix_seed(mix_seed(cfg.seed, 2000 + epoch as u64), idx[k] as u64);
                    let (img, lab, _) = augment(seed, &cfg.augment, &rec.image, y)?;
                    Ok((img, lab))
                } else {
                    Ok((rec.image.clone(), y.clone()))
                }
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let (total, grad, terms) = batch_gradient(&model, &batch, &cfg.loss, critic, exec)?;
            opt.step(&mut model.params, &grad);
            loss_sum += total;
            steps.push(StepLog { epoch, step, total, terms });
            step += 1;
        }
        let reports = evaluate_model(&model, &val, false, None, exec)?;
        let (val_dice, val_mhd_px) = summary(&reports);
        let mean_loss = loss_sum / batches.len().max(1) as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.5} val dice {val_dice:.4} val mhd {val_mhd_px:?}");
        epochs.push(EpochLog { epoch, mean_loss, val_dice, val_mhd_px });
        if val_dice > best.0 {
            best = (val_dice, epoch, model.params.clone());
        } else if epoch - best.1 >= cfg.patience {
            log::info!("no validation improvement for {} epochs, stopping", cfg.patience);
            break;
        }
    }
    let (best_val_dice, best_epoch, params) = best;
    model.params = params;
    Ok(TrainOutcome { model, best_epoch, best_val_dice, steps, epochs })
}

/// Candidate weights per loss term, searched greedily in `order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Term indices into `[wce, dice, bp, ap, bc]`.
    pub order: Vec<usize>,
    pub candidates: Vec<Vec<f64>>,
}

/// `n` log-spaced points over `[1e-3, 1e3]`.
pub fn log_grid(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let (lo, hi) = (LAMBDA_MIN.log10(), LAMBDA_MAX.log10());
    (0..n).map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / (n - 1) as f64)).collect()
}

impl Default for GridSpec {
    fn default() -> Self {
        let order = vec![1, 2, 3, 4];
        GridSpec { candidates: vec![log_grid(7); order.len()], order }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub term: String,
    pub lambdas: [f64; 5],
    pub val_dice: f64,
    pub val_mhd_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: LossConfig,
    pub trials: Vec<Trial>,
}

const DICE_TIE: f64 = 1e-9;

/// Higher validation Dice wins; near-ties go to the lower validation MHD.
fn better(a: &Trial, b: &Trial) -> bool {
    if (a.val_dice - b.val_dice).abs() > DICE_TIE {
        return a.val_dice > b.val_dice;
    }
    a.val_mhd_px.unwrap_or(f64::INFINITY) < b.val_mhd_px.unwrap_or(f64::INFINITY)
}

/// Coordinate-wise greedy search over the loss weights. The AP weight is
/// skipped (and held at zero) when no critic is available.
pub fn grid_search_lambda(
    records: &[Record],
    split: &SplitAssignment,
    base: &TrainConfig,
    grid: &GridSpec,
    critic: Option<&FrozenCritic>,
    exec: Exec,
) -> Result<GridResult> {
    if grid.order.len() != grid.candidates.len() || grid.order.iter().any(|&t| t >= TERM_NAMES.len()) {
        return Err(Error::InvalidConfig("grid order and candidate lists do not line up".into()));
    }
    let val: Vec<&Record> = split.indices(records, Partition::Val).iter().map(|&i| &records[i]).collect();
    let mut current = base.loss.clone();
    if critic.is_none() {
        current.lambda_ap = 0.0;
    }
    let mut trials = Vec::new();
    for (&term, cands) in grid.order.iter().zip(&grid.candidates) {
        if term == 3 && critic.is_none() {
            log::warn!("no critic checkpoint: skipping the ap weight");
            continue;
        }
        let mut best: Option<Trial> = None;
        for &c in cands {
            let mut l = current.lambdas();
            l[term] = c;
            let loss = current.clone().with_lambdas(l);
            let cfg = TrainConfig { loss, ..base.clone() };
            let out = train(records, split, &cfg, critic, exec)?;
            let reports = evaluate_model(&out.model, &val, true, None, exec)?;
            let (val_dice, val_mhd_px) = summary(&reports);
            log::info!("grid {}={c}: val dice {val_dice:.4} mhd {val_mhd_px:?}", TERM_NAMES[term]);
            let t = Trial { term: TERM_NAMES[term].to_string(), lambdas: l, val_dice, val_mhd_px };
            if best.as_ref().map_or(true, |b| better(&t, b)) {
                best = Some(t.clone());
            }
            trials.push(t);
        }
        if let Some(b) = best {
            current = current.with_lambdas(b.lambdas);
        }
    }
    Ok(GridResult { best: current, trials })
}

/// Nested term subsets: all five, then dropping bc, ap, bp and dice in turn.
pub fn ablation_subsets() -> Vec<[bool; 5]> {
    (0..5).map(|k| std::array::from_fn(|t| t < 5 - k)).collect()
}

pub fn subset_label(terms: &[bool; 5]) -> String {
    TERM_NAMES.iter().zip(terms).filter(|(_, &on)| on).map(|(n, _)| *n).collect::<Vec<_>>().join("+")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub accuracy: f64,
    pub dice: f64,
    pub mhd_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub terms: [bool; 5],
    pub accuracy: f64,
    pub dice: f64,
    pub mhd_px: f64,
    pub runs: Vec<SeedScore>,
}

/// Trains each term subset once per seed and scores it on the test partition
/// (post-processed). Weights of enabled terms come from `cfg.loss`.
pub fn ablation(
    records: &[Record],
    split: &SplitAssignment,
    cfg: &TrainConfig,
    subsets: &[[bool; 5]],
    seeds: &[u64],
    critic: Option<&FrozenCritic>,
    exec: Exec,
) -> Result<Vec<AblationRow>> {
    let test: Vec<&Record> = split.indices(records, Partition::Test).iter().map(|&i| &records[i]).collect();
    let mut rows = Vec::new();
    for &terms in subsets {
        let mut l = cfg.loss.lambdas();
        for (v, on) in l.iter_mut().zip(terms) {
            if !on {
                *v = 0.0;
            }
        }
        let mut runs = Vec::new();
        for &seed in seeds {
            let run_cfg = TrainConfig { loss: cfg.loss.clone().with_lambdas(l), seed, ..cfg.clone() };
            let out = train(records, split, &run_cfg, critic, exec)?;
            let m = mean_report(&evaluate_model(&out.model, &test, true, None, exec)?)
                .ok_or_else(|| Error::InvalidConfig("test partition is empty".into()))?;
            log::info!("ablation {} seed {seed}: dice {:.4} mhd {:?}", subset_label(&terms), m.dice, m.mhd_px);
            runs.push(SeedScore { seed, accuracy: m.accuracy, dice: m.dice, mhd_px: m.mhd_px });
        }
        let k = runs.len().max(1) as f64;
        rows.push(AblationRow {
            label: subset_label(&terms),
            terms,
            accuracy: runs.iter().map(|r| r.accuracy).sum::<f64>() / k,
            dice: runs.iter().map(|r| r.dice).sum::<f64>() / k,
            mhd_px: runs.iter().map(|r| r.mhd_px.unwrap_or(f64::NAN)).sum::<f64>() / k,
            runs,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{},accuracy,dice,mhd_px\n", TERM_NAMES.join(","));
    for row in rows {
        let marks: Vec<&str> = row.terms.iter().map(|&t| if t { "1" } else { "0" }).collect();
        s.push_str(&format!("{},{},{},{}\n", marks.join(","), row.accuracy, row.dice, row.mhd_px));
    }
    s
}
