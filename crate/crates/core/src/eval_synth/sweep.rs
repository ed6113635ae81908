use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, SamplerKind, TrainConfig};
use crate::conditioning::{tokenize_plain, tokenize_with_tags, ConditioningInput, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, purpose};
use crate::sampler::{sample_ddim, sample_ddpm, NoisePredictor, SampleOptions, SampleTrajectory};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::trainer::{train, TrainItem, TrainOptions};

use super::metrics::{binding_accuracy, frechet_gaussian_distance, RandomProjection};
use super::shapes::{generate_dataset, SceneSpec};

/// Conditioning for a generation request: the complete description of the
/// scene, with part-of-speech tokens when the model was trained with them.
pub fn prompt_condition(spec: &SceneSpec, vocab: &Vocabulary, insert_tokens: bool) -> Result<ConditioningInput> {
    let (words, tags) = spec.synthetic_caption();
    if insert_tokens {
        tokenize_with_tags(vocab, &words, &tags)
    } else {
        tokenize_plain(vocab, &words, &tags)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub data: DataConfig,
    pub count: usize,
    pub features: usize,
    pub fill_tolerance: f64,
    pub sampler: SamplerKind,
    pub sample_steps: usize,
    pub insert_tokens: bool,
}

impl EvalSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            data: cfg.data.clone(),
            count: cfg.eval.count,
            features: cfg.eval.features,
            fill_tolerance: cfg.eval.fill_tolerance,
            sampler: cfg.sample.sampler,
            sample_steps: cfg.sample.steps,
            insert_tokens: cfg.knowledge.policy.insert_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub scale: f64,
    pub toy_fid: f64,
    pub binding_accuracy: f64,
}

/// Requested scenes and their ground-truth renderings for an evaluation
/// seed. Scenes are drawn independently of any training set.
pub fn eval_scenes<S: Scalar>(settings: &EvalSettings, seed: u64) -> Result<Vec<(Tensor<S>, SceneSpec)>> {
    generate_dataset(&settings.data, settings.count, derive_seed(&[seed, purpose::EVAL]))
}

/// Seed of the `i`-th generated evaluation image.
pub fn eval_item_seed(seed: u64, i: usize) -> u64 {
    derive_seed(&[seed, purpose::EVAL, i as u64])
}

pub fn generate<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<S>,
    cond: &ConditioningInput,
    guidance: f64,
    sampler: SamplerKind,
    steps: usize,
    seed: u64,
    opts: SampleOptions,
) -> Result<SampleTrajectory<S>> {
    match sampler {
        SamplerKind::Ddpm => sample_ddpm(model, schedule, cond, guidance, seed, opts),
        SamplerKind::Ddim => sample_ddim(model, schedule, cond, guidance, steps, seed, opts),
    }
}

/// For each guidance scale, samples one image per evaluation scene with
/// fixed per-index seeds and scores toy-FID against the ground-truth
/// renderings and binding accuracy against the requested scenes.
pub fn pareto_sweep<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<S>,
    vocab: &Vocabulary,
    scales: &[f64],
    settings: &EvalSettings,
    seed: u64,
) -> Result<Vec<ParetoPoint>> {
    if scales.is_empty() {
        return Err(Error::Config("at least one guidance scale is required".into()));
    }
    let scenes = eval_scenes::<S>(settings, seed)?;
    let [h, w, c] = model.image_shape();
    let proj = RandomProjection::new(h * w * c, settings.features, seed);
    let reference: Vec<Tensor<S>> = scenes.iter().map(|(im, _)| im.clone()).collect();
    let specs: Vec<SceneSpec> = scenes.iter().map(|(_, s)| s.clone()).collect();
    let ref_stats = proj.stats(&reference)?;
    let conds = specs.iter().map(|s| prompt_condition(s, vocab, settings.insert_tokens)).collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(scales.len());
    for &scale in scales {
        let mut images = Vec::with_capacity(conds.len());
        for (i, cond) in conds.iter().enumerate() {
            let traj = generate(
                model,
                schedule,
                cond,
                scale,
                settings.sampler,
                settings.sample_steps,
                eval_item_seed(seed, i),
                SampleOptions::default(),
            )?;
            images.push(traj.image);
        }
        let toy_fid = frechet_gaussian_distance(&proj.stats(&images)?, &ref_stats)?;
        let acc = binding_accuracy(&images, &specs, settings.fill_tolerance)?;
        log::info!("scale {scale}: toy-FID {toy_fid:.4}, binding accuracy {acc:.4}");
        points.push(ParetoPoint { scale, toy_fid, binding_accuracy: acc });
    }
    Ok(points)
}

/// `scale,toy_fid,binding_accuracy` rows with a header.
pub fn pareto_csv(points: &[ParetoPoint]) -> String {
    let mut out = String::from("scale,toy_fid,binding_accuracy\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.scale, p.toy_fid, p.binding_accuracy));
    }
    out
}

/// One cell of the expert-count ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub experts: usize,
    pub toy_fid: f64,
    pub binding_accuracy: f64,
    pub final_loss: f64,
}

/// Trains one bank per `(seed, n)` under the same total step budget and
/// warm-start protocol, then scores each at `cfg.sample.guidance`.
pub fn expert_ablation<S: Scalar>(
    cfg: &TrainConfig,
    items: &[TrainItem<S>],
    vocab: &Vocabulary,
    experts: &[usize],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let settings = EvalSettings::from_config(cfg);
    let mut rows = Vec::with_capacity(experts.len() * seeds.len());
    for &seed in seeds {
        for &n in experts {
            let mut run = cfg.clone();
            run.seed = seed;
            run.experts = n;
            let out = train(&run, items, vocab, TrainOptions::default())?;
            let schedule = NoiseSchedule::<S>::from_spec(&run.schedule)?;
            let p = pareto_sweep(&out.bank, &schedule, vocab, &[cfg.sample.guidance], &settings, seed)?[0];
            let final_loss = out.records.last().map_or(f64::NAN, |r| r.loss);
            log::info!("seed {seed}, {n} experts: toy-FID {:.4}", p.toy_fid);
            rows.push(AblationRow { seed, experts: n, toy_fid: p.toy_fid, binding_accuracy: p.binding_accuracy, final_loss });
        }
    }
    Ok(rows)
}
