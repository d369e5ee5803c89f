use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::client::Client;
use super::message::{params_to_arrays, Payload, Transcript, TrialResult, UploadPurpose};
use crate::autodiff::{AdamState, ParamStore, RngStream, Tape, Tensor, Var};
use crate::benchdata::BenchmarkTable;
use crate::error::{Error, Result};
use crate::metafeat::{extract_on_tape, sample_batch, DatasetDescriptor, EXTRACTOR_PREFIX};
use crate::ranker::{
    apply_update, backward, build_loss, grads_by_name, init_ranker, is_extractor_param, merge_grads, ndcg,
    predicted_positions, project_feature, relevance, score_pool, train_step, ExperienceTriplet, FeatureRef,
    LossSettings, RankLoss, RankerSpec, ScoredGroup, SiTracker, StepStats, TripletVars,
};
use crate::space::{Config, SpaceKind};
use crate::transform::TransformMatrix;

type Grads = BTreeMap<String, Tensor>;

/// Ranking groups per training step; each holds `batch_size / 2` triplets.
pub const GROUPS_PER_STEP: usize = 2;

/// Switches that turn the full method into one of its ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodFlags {
    /// Use stored past features as they are.
    pub no_transform: bool,
    /// Keep the extractor fixed during online training.
    pub freeze_extractor: bool,
    /// Skip online training entirely.
    pub freeze_ranker: bool,
    /// Train only on the current task's trials.
    pub latest_data_only: bool,
    pub no_si: bool,
    pub no_triplet: bool,
    pub mse_loss: bool,
}

impl MethodFlags {
    pub fn apply(&self, base: LossSettings) -> LossSettings {
        LossSettings {
            rank: if self.mse_loss { RankLoss::Mse } else { base.rank },
            lambda_sim: if self.no_triplet { 0.0 } else { base.lambda_sim },
            lambda_reg: if self.no_si { 0.0 } else { base.lambda_reg },
            alpha: base.alpha,
        }
    }

    /// Whether warm-up differs from the full method's.
    pub fn changes_warmup(&self) -> bool {
        self.no_triplet || self.mse_loss
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerSettings {
    pub ranker: RankerSpec,
    pub loss: LossSettings,
    pub lr: f64,
    pub lr_trans: f64,
    /// Triplets per training step.
    pub batch_size: usize,
    pub n_iters: usize,
    pub n_trans: usize,
    /// Relative frequency of offline, past and current triplets.
    pub sampling_ratio: [f64; 3],
    pub exploration: f64,
    pub budget: usize,
    pub pool_size: usize,
    pub warmup_triplets: usize,
    pub warmup_steps: usize,
    pub xi: f64,
    pub flags: MethodFlags,
}

impl ServerSettings {
    pub fn effective_loss(&self) -> LossSettings {
        self.flags.apply(self.loss)
    }
}

/// Picks `b` distinct indices one at a time: with probability `ratio` the
/// best remaining score, otherwise a uniform remaining index.
pub fn select_top_b(scores: &[f64], b: usize, ratio: f64, rng: &mut RngStream) -> Result<Vec<usize>> {
    if b > scores.len() {
        return Err(Error::PoolTooSmall {
            requested: b,
            available: scores.len(),
        });
    }
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut picks = Vec::with_capacity(b);
    for _ in 0..b {
        let k = if rng.bernoulli(ratio) {
            (0..left.len())
                .max_by(|&x, &y| scores[left[x]].total_cmp(&scores[left[y]]).then(left[y].cmp(&left[x])))
                .expect("non-empty")
        } else {
            rng.below(left.len())
        };
        picks.push(left.remove(k));
    }
    Ok(picks)
}

/// Candidate pool for one task, drawn from the task's `pool` stream so
/// that every method sees the same candidates.
pub fn sample_pool<'a>(benchmark: &'a BenchmarkTable, dataset: &str, pool_size: usize, task_rng: &RngStream) -> Result<Vec<&'a str>> {
    let texts = benchmark.configs_for(dataset);
    if texts.is_empty() {
        return Err(Error::BenchmarkMiss {
            dataset: dataset.to_string(),
            config: "*".into(),
        });
    }
    let n = pool_size.min(texts.len());
    Ok(task_rng
        .derive_str("pool")
        .sample_indices(texts.len(), n)
        .into_iter()
        .map(|i| texts[i])
        .collect())
}

fn parse_configs(space: SpaceKind, texts: &[&str]) -> Result<Vec<Config>> {
    texts.iter().map(|t| Config::parse(space, t)).collect()
}

/// Result of serving one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub task: usize,
    pub dataset_id: String,
    pub pool: Vec<String>,
    pub picks: Vec<usize>,
    pub trials: Vec<TrialResult>,
    pub best: TrialResult,
    pub train_stats: Vec<StepStats>,
}

/// Everything the platform keeps between tasks.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub settings: ServerSettings,
    pub params: ParamStore,
    adam: AdamState,
    pub si: SiTracker,
    offline: Vec<DatasetDescriptor>,
    offline_index: BTreeMap<String, usize>,
    canonical: Vec<Vec<usize>>,
    pub s_offline: Vec<ExperienceTriplet>,
    pub s_past: Vec<ExperienceTriplet>,
    pub transforms: Vec<TransformMatrix>,
    /// Canonical-batch offline features per extractor version.
    old_features: BTreeMap<usize, Vec<Vec<f64>>>,
    pub snapshots: Vec<ParamStore>,
    /// Index of the next task to serve, starting at 1.
    pub tau: usize,
}

/// Meta-feature of `d` on `indices` with fixed parameters.
fn feature_values(params: &ParamStore, settings: &ServerSettings, d: &DatasetDescriptor, indices: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = extract_on_tape(&mut tape, params, &settings.ranker.extractor, d, indices)?;
    Ok(tape.value(v).values().to_vec())
}

impl ServerState {
    pub fn new(settings: ServerSettings, offline: Vec<DatasetDescriptor>, rng: &RngStream) -> Result<Self> {
        let params = init_ranker(&settings.ranker, &mut rng.derive_str("init"))?;
        let mut canon_rng = rng.derive_str("canonical");
        let mut canonical = Vec::with_capacity(offline.len());
        let mut offline_index = BTreeMap::new();
        for (i, d) in offline.iter().enumerate() {
            if offline_index.insert(d.id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate offline dataset `{}`", d.id)));
            }
            canonical.push(sample_batch(d, settings.ranker.extractor.batch_size, &mut canon_rng)?);
        }
        Ok(Self {
            si: SiTracker::new(&params, settings.xi),
            adam: AdamState::new(),
            snapshots: vec![params.clone()],
            params,
            settings,
            offline,
            offline_index,
            canonical,
            s_offline: Vec::new(),
            s_past: Vec::new(),
            transforms: Vec::new(),
            old_features: BTreeMap::new(),
            tau: 1,
        })
    }

    pub fn offline(&self) -> &[DatasetDescriptor] {
        &self.offline
    }

    pub fn current_version(&self) -> usize {
        self.tau
    }

    fn offline_feature(&self, i: usize) -> Result<Vec<f64>> {
        feature_values(&self.params, &self.settings, &self.offline[i], &self.canonical[i])
    }

    fn cached_feature(&self, i: usize, feats: &mut [Option<Vec<f64>>]) -> Result<Vec<f64>> {
        if feats[i].is_none() {
            feats[i] = Some(self.offline_feature(i)?);
        }
        Ok(feats[i].clone().expect("filled"))
    }

    fn all_offline_features(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.offline.len()).map(|i| self.offline_feature(i)).collect()
    }

    /// Samples the offline experience and trains every parameter on it;
    /// leaves `Ω = 0` and records `θ^(0)`.
    pub fn warmup(&mut self, benchmark: &BenchmarkTable, rng: &RngStream) -> Result<Vec<StepStats>> {
        let space = self.settings.ranker.space;
        let mut pairs = Vec::new();
        for d in &self.offline {
            let texts = benchmark.configs_for(&d.id);
            if texts.is_empty() {
                return Err(Error::BenchmarkMiss {
                    dataset: d.id.clone(),
                    config: "*".into(),
                });
            }
            for t in texts {
                pairs.push((d.id.clone(), t.to_string()));
            }
        }
        let mut pick_rng = rng.derive_str("pairs");
        let n = self.settings.warmup_triplets.min(pairs.len());
        let mut chosen = pick_rng.sample_indices(pairs.len(), n);
        chosen.sort_unstable();
        self.s_offline.clear();
        for i in chosen {
            let (d, c) = &pairs[i];
            let e = benchmark.get(d, c)?;
            self.s_offline.push(ExperienceTriplet::new(Config::parse(space, c)?, d.clone(), FeatureRef::Live, e.ap_val)?);
        }
        let by_dataset = self.offline_groups();
        let loss = self.settings.effective_loss();
        let enc = self.settings.ranker.encoder;
        let ex = self.settings.ranker.extractor;
        let mut batch_rng = rng.derive_str("batches");
        let mut drop_rng = rng.derive_str("dropout");
        let mut stats = Vec::with_capacity(self.settings.warmup_steps);
        let keys: Vec<&String> = by_dataset.keys().collect();
        let per_group = (self.settings.batch_size / GROUPS_PER_STEP).max(1);
        for _ in 0..self.settings.warmup_steps {
            if keys.is_empty() {
                break;
            }
            let chosen: Vec<(usize, Vec<&ExperienceTriplet>)> = batch_rng
                .sample_indices(keys.len(), GROUPS_PER_STEP.min(keys.len()))
                .into_iter()
                .map(|k| {
                    let members = &by_dataset[keys[k]];
                    let items = batch_rng
                        .sample_indices(members.len(), per_group.min(members.len()))
                        .into_iter()
                        .map(|m| &self.s_offline[members[m]])
                        .collect();
                    (self.offline_index[keys[k]], items)
                })
                .collect();
            let offline = &self.offline;
            let with_triplet = loss.lambda_sim != 0.0 && chosen.len() > 1;
            let s = train_step(
                &mut self.params,
                &mut self.adam,
                self.settings.lr,
                &enc,
                &loss,
                None,
                Some(&mut drop_rng),
                |tape, store| {
                    let live = |tape: &mut Tape, d: usize, rng: &mut RngStream| -> Result<Var> {
                        let idx = sample_batch(&offline[d], ex.batch_size, rng)?;
                        extract_on_tape(tape, store, &ex, &offline[d], &idx)
                    };
                    let mut groups = Vec::with_capacity(chosen.len());
                    for (d, items) in &chosen {
                        groups.push(ScoredGroup {
                            phi: live(tape, *d, &mut batch_rng)?,
                            configs: items.iter().map(|t| t.config.clone()).collect(),
                            aps: items.iter().map(|t| t.ap).collect(),
                        });
                    }
                    let triplet = if with_triplet {
                        Some(TripletVars {
                            anchor: groups[0].phi,
                            same: live(tape, chosen[0].0, &mut batch_rng)?,
                            other: groups[1].phi,
                        })
                    } else {
                        None
                    };
                    Ok((groups, triplet))
                },
            )?;
            stats.push(s);
        }
        self.si = SiTracker::new(&self.params, self.settings.xi);
        self.snapshots = vec![self.params.clone()];
        Ok(stats)
    }

    fn offline_groups(&self) -> BTreeMap<String, Vec<usize>> {
        let mut m: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.s_offline.iter().enumerate() {
            m.entry(t.dataset_id.clone()).or_default().push(i);
        }
        m
    }

    /// Past experience grouped by the task that produced it.
    fn past_groups(&self) -> Vec<Vec<usize>> {
        let mut m: BTreeMap<(usize, String), Vec<usize>> = BTreeMap::new();
        for (i, t) in self.s_past.iter().enumerate() {
            let v = match &t.feature {
                FeatureRef::Stored(f) => f.version,
                FeatureRef::Live => 0,
            };
            m.entry((v, t.dataset_id.clone())).or_default().push(i);
        }
        m.into_values().collect()
    }

    fn extractor_payload(&self) -> Payload {
        Payload::ExtractorDownload {
            version: self.tau,
            params: params_to_arrays(&self.params.subset(EXTRACTOR_PREFIX)),
        }
    }

    /// Inference, trials and online training for the next task.
    pub fn serve_task(
        &mut self,
        dataset: &DatasetDescriptor,
        benchmark: &BenchmarkTable,
        rng: &RngStream,
        transcript: &mut Transcript,
    ) -> Result<TaskOutcome> {
        let spec = self.settings.ranker;
        self.serve_task_with(dataset, benchmark, rng, transcript, |params, pool, phi| {
            score_pool(params, &spec, pool, phi)
        })
    }

    /// [`serve_task`](Self::serve_task) with the pool scored by `score`
    /// instead of the ranker.
    pub fn serve_task_with<F>(
        &mut self,
        dataset: &DatasetDescriptor,
        benchmark: &BenchmarkTable,
        rng: &RngStream,
        transcript: &mut Transcript,
        score: F,
    ) -> Result<TaskOutcome>
    where
        F: FnOnce(&ParamStore, &[Config], &[f64]) -> Result<Vec<f64>>,
    {
        let t = self.tau;
        let space = self.settings.ranker.space;
        let mut client = Client::new(t, dataset, benchmark, self.settings.ranker.extractor, rng.derive_str("client"))?;
        let download = transcript.send(t, self.extractor_payload())?;
        client.receive_extractor(&download.payload)?;
        let (phi, _) = client.extract(UploadPurpose::Serve, transcript)?;

        let pool_texts = sample_pool(benchmark, &dataset.id, self.settings.pool_size, rng)?;
        let pool = parse_configs(space, &pool_texts)?;
        let scores = score(&self.params, &pool, &phi.values)?;
        let picks = select_top_b(
            &scores,
            self.settings.budget,
            self.settings.exploration,
            &mut rng.derive_str("select"),
        )?;
        let suggestion = transcript.send(
            t,
            Payload::ConfigSuggestion {
                space,
                configs: picks.iter().map(|&i| pool_texts[i].to_string()).collect(),
            },
        )?;
        let trials = client.run_trials(&suggestion.payload, transcript)?;
        let best = trials
            .iter()
            .fold(None::<&TrialResult>, |acc, x| match acc {
                Some(a) if a.ap_val >= x.ap_val => Some(a),
                _ => Some(x),
            })
            .cloned()
            .ok_or(Error::EmptyBatch("serve_task"))?;

        let current: Vec<ExperienceTriplet> = trials
            .iter()
            .map(|r| ExperienceTriplet::new(Config::parse(space, &r.config)?, dataset.id.clone(), FeatureRef::Live, r.ap_val))
            .collect::<Result<_>>()?;
        let start = self.params.clone();
        let mut train_stats = Vec::new();
        if !self.settings.flags.freeze_ranker {
            let mut train_rng = rng.derive_str("train");
            let mut drop_rng = rng.derive_str("dropout");
            for _ in 0..self.settings.n_iters {
                train_stats.push(self.online_step(&mut client, &current, transcript, &mut train_rng, &mut drop_rng)?);
            }
        }

        self.si.consolidate(&start, &self.params)?;
        self.snapshots.push(self.params.clone());
        self.old_features.insert(t, self.all_offline_features()?);
        self.transforms.push(TransformMatrix::identity(self.settings.ranker.hidden(), t));
        let (final_phi, _) = client.extract(UploadPurpose::Final, transcript)?;
        for c in current {
            self.s_past.push(ExperienceTriplet::new(
                c.config,
                c.dataset_id,
                FeatureRef::Stored(final_phi.clone()),
                c.ap,
            )?);
        }
        if let Payload::ExtractorUpload { params, .. } = client.upload_extractor(transcript)? {
            for a in params {
                let v = a.array.to_tensor()?;
                *self.params.get_mut(&a.name)? = v;
            }
        }
        self.tau += 1;
        Ok(TaskOutcome {
            task: t,
            dataset_id: dataset.id.clone(),
            pool: pool_texts.iter().map(|s| s.to_string()).collect(),
            picks,
            trials,
            best,
            train_stats,
        })
    }

    /// Which source feeds this step's group: 0 offline, 1 past, 2 current.
    fn pick_source(&self, rng: &mut RngStream) -> usize {
        let flags = self.settings.flags;
        let avail = [
            !flags.latest_data_only && !self.s_offline.is_empty(),
            !flags.latest_data_only && !self.s_past.is_empty(),
            true,
        ];
        let w: Vec<f64> = (0..3)
            .map(|i| if avail[i] { self.settings.sampling_ratio[i] } else { 0.0 })
            .collect();
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return 2;
        }
        let mut x = rng.next_f64() * total;
        for (i, wi) in w.iter().enumerate() {
            if x < *wi {
                return i;
            }
            x -= wi;
        }
        2
    }

    fn online_step(
        &mut self,
        client: &mut Client<'_>,
        current: &[ExperienceTriplet],
        transcript: &mut Transcript,
        rng: &mut RngStream,
        dropout: &mut RngStream,
    ) -> Result<StepStats> {
        let (stats, unreg, reg) = self.step_grads(client, current, transcript, rng, dropout)?;
        let flags = self.settings.flags;
        let loss = self.settings.effective_loss();
        let frozen = |n: &str| flags.freeze_extractor && is_extractor_param(n);
        apply_update(&mut self.params, &mut self.adam, self.settings.lr, &loss, &unreg, &reg, &frozen, Some(&mut self.si))?;
        client.sync_extractor(&self.params)?;
        Ok(stats)
    }

    /// Trains the transforms, then builds one batch and returns its
    /// unregularized and regularizer gradients by parameter name.
    fn step_grads(
        &mut self,
        client: &mut Client<'_>,
        current: &[ExperienceTriplet],
        transcript: &mut Transcript,
        rng: &mut RngStream,
        dropout: &mut RngStream,
    ) -> Result<(StepStats, Grads, Grads)> {
        let flags = self.settings.flags;
        let loss = self.settings.effective_loss();
        let version = self.current_version();
        let mut cur_feats: Vec<Option<Vec<f64>>> = vec![None; self.offline.len()];
        if !flags.no_transform && !self.transforms.is_empty() {
            let all = self.all_offline_features()?;
            for z in &mut self.transforms {
                let old = &self.old_features[&z.source_version];
                z.train(old, &all, self.settings.n_trans, self.settings.lr_trans)?;
            }
            cur_feats = all.into_iter().map(Some).collect();
        }

        let per_group = (self.settings.batch_size / GROUPS_PER_STEP).max(1);
        let mut picked: Vec<(Vec<Config>, Vec<f64>, Option<Vec<f64>>)> = Vec::with_capacity(GROUPS_PER_STEP);
        for _ in 0..GROUPS_PER_STEP {
            let (members, phi_source): (Vec<&ExperienceTriplet>, Option<Vec<f64>>) = match self.pick_source(rng) {
                0 => {
                    let anchor = &self.s_offline[rng.below(self.s_offline.len())].dataset_id;
                    let all: Vec<&ExperienceTriplet> = self.s_offline.iter().filter(|t| &t.dataset_id == anchor).collect();
                    let pick = rng.sample_indices(all.len(), per_group.min(all.len()));
                    let i = self.offline_index[anchor];
                    (pick.into_iter().map(|k| all[k]).collect(), Some(self.cached_feature(i, &mut cur_feats)?))
                }
                1 => {
                    let groups = self.past_groups();
                    let g = &groups[rng.below(groups.len())];
                    let pick = rng.sample_indices(g.len(), per_group.min(g.len()));
                    let items: Vec<&ExperienceTriplet> = pick.into_iter().map(|k| &self.s_past[g[k]]).collect();
                    let FeatureRef::Stored(f) = &items[0].feature else {
                        return Err(Error::Invalid("past triplet without a stored feature".into()));
                    };
                    let v = if flags.no_transform {
                        f.values.clone()
                    } else {
                        project_feature(f, version, &self.transforms)?
                    };
                    (items, Some(v))
                }
                _ => {
                    let pick = rng.sample_indices(current.len(), per_group.min(current.len()));
                    (pick.into_iter().map(|k| &current[k]).collect(), None)
                }
            };
            picked.push((
                members.iter().map(|t| t.config.clone()).collect(),
                members.iter().map(|t| t.ap).collect(),
                phi_source,
            ));
        }

        let (anchor_phi, anchor_handle) = client.extract(UploadPurpose::Anchor, transcript)?;
        let positive = if loss.lambda_sim != 0.0 && self.offline.len() > 0 {
            Some(client.extract(UploadPurpose::Positive, transcript)?)
        } else {
            None
        };
        let negative = match positive {
            Some(_) => Some(self.cached_feature(rng.below(self.offline.len()), &mut cur_feats)?),
            None => None,
        };

        let mut tape = Tape::new();
        let row = |v: &[f64]| Tensor::new(vec![1, v.len()], v.to_vec());
        let anchor_var = tape.leaf(row(&anchor_phi.values)?);
        let pos_var = match &positive {
            Some((f, _)) => Some(tape.leaf(row(&f.values)?)),
            None => None,
        };
        let triplet = match (pos_var, &negative) {
            (Some(p), Some(n)) => {
                let other = tape.constant(row(n)?);
                Some(TripletVars {
                    anchor: anchor_var,
                    same: p,
                    other,
                })
            }
            _ => None,
        };
        let mut groups = Vec::with_capacity(picked.len());
        for (configs, aps, phi_source) in picked {
            let phi = match phi_source {
                Some(v) => tape.constant(row(&v)?),
                None => anchor_var,
            };
            groups.push(ScoredGroup { phi, configs, aps });
        }
        let si = if loss.lambda_reg != 0.0 { Some(&self.si) } else { None };
        let graph = build_loss(&mut tape, &self.params, &self.settings.ranker.encoder, &loss, &groups, triplet, si, Some(dropout))?;
        let stats = graph.stats(&tape);
        let (gu, gr) = backward(&tape, &graph)?;
        let mut unreg = grads_by_name(&tape, &gu);
        if !flags.freeze_extractor {
            if let Some(g) = gu.wrt(anchor_var) {
                merge_grads(&mut unreg, client.extractor_grads(anchor_handle, g.values())?);
            }
            if let (Some(p), Some((_, h))) = (pos_var, positive) {
                if let Some(g) = gu.wrt(p) {
                    merge_grads(&mut unreg, client.extractor_grads(h, g.values())?);
                }
            }
        }
        let reg = gr.map(|g| grads_by_name(&tape, &g)).unwrap_or_default();
        Ok((stats, unreg, reg))
    }
}

/// Mean NDCG of the ranker's order over each dataset's benchmarked
/// configs, with one canonical batch per dataset.
pub fn ranking_ndcg(
    params: &ParamStore,
    spec: &RankerSpec,
    datasets: &[DatasetDescriptor],
    benchmark: &BenchmarkTable,
    rng: &RngStream,
) -> Result<f64> {
    let mut total = 0.0;
    for d in datasets {
        let idx = sample_batch(d, spec.extractor.batch_size, &mut rng.derive_str(&d.id))?;
        let mut tape = Tape::new();
        let v = extract_on_tape(&mut tape, params, &spec.extractor, d, &idx)?;
        let phi = tape.value(v).values().to_vec();
        let texts = benchmark.configs_for(&d.id);
        let configs = parse_configs(spec.space, &texts)?;
        let aps: Vec<f64> = texts.iter().map(|c| benchmark.get(&d.id, c).map(|e| e.ap_val)).collect::<Result<_>>()?;
        let scores = score_pool(params, spec, &configs, &phi)?;
        let pos = predicted_positions(&scores);
        let rel = relevance(&aps);
        let mut ordered = vec![0.0; rel.len()];
        for (i, p) in pos.iter().enumerate() {
            ordered[*p] = rel[i];
        }
        total += ndcg(&ordered)?;
    }
    Ok(total / datasets.len().max(1) as f64)
}

/// Per-kind message counts that one task must produce.
pub fn expected_kinds() -> BTreeSet<&'static str> {
    Payload::KINDS.into_iter().collect()
}
