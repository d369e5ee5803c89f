//! Central-difference gradient suites over every differentiable piece of
//! the ranker, from single layers up to the full training objective.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autodiff::{
    affine, finite_diff_check, init_affine, init_attention, relative_error, seeded_rng, self_attention_encoder,
    GradCheckReport, ParamStore, RngStream, Tape, Tensor, Var,
};
use crate::benchdata::{gen_synthetic_world, SyntheticWorldSpec};
use crate::confenc::EncoderConfig;
use crate::error::Result;
use crate::metafeat::{extract_on_tape, init_extractor, DatasetDescriptor, ExtractorConfig};
use crate::ranker::{
    build_loss, init_ranker, mse_loss, ranking_loss, triplet_loss, LossSettings, RankLoss, RankerSpec, ScoredGroup,
    SiTracker, TripletVars,
};
use crate::space::{enumerate_hpo, sample_nas, Config, SpaceKind};
use crate::transform::TransformMatrix;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_COORDS: usize = 50;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub worst: Option<(String, usize)>,
}

impl SuiteResult {
    fn new(name: &str, r: GradCheckReport) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            skipped: r.skipped,
            worst: r.worst,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).expect("shape matches")
}

fn tiny_datasets() -> Result<Vec<DatasetDescriptor>> {
    let spec = SyntheticWorldSpec {
        datasets: 3,
        images_per_dataset: 10,
        latent_dim: 3,
        noise: 0.1,
        seed: 11,
    };
    Ok(gen_synthetic_world(&spec, SpaceKind::Hpo)?.datasets)
}

fn extractor_cfg(use_labels: bool) -> ExtractorConfig {
    ExtractorConfig {
        hidden: 8,
        use_labels,
        batch_size: 5,
        ..ExtractorConfig::default()
    }
}

fn space_configs(space: SpaceKind, n: usize, rng: &mut RngStream) -> Result<Vec<Config>> {
    match space {
        SpaceKind::Hpo => {
            let all = enumerate_hpo();
            Ok(rng.sample_indices(all.len(), n).into_iter().map(|i| Config::Hpo(all[i])).collect())
        }
        SpaceKind::Nas => (0..n).map(|_| Ok(Config::Nas(sample_nas(rng, None)?))).collect(),
    }
}

/// An SI tracker with nonzero importance whose reference differs from the
/// returned parameters.
fn consolidated(p0: &ParamStore, rng: &mut RngStream) -> Result<(SiTracker, ParamStore)> {
    let mut si = SiTracker::new(p0, 0.1);
    let mut p1 = p0.clone();
    let mut grads = BTreeMap::new();
    for (name, v) in p0.iter() {
        for x in p1.get_mut(name)?.values_mut() {
            *x += 0.02 * rng.normal();
        }
        grads.insert(name.to_string(), random_tensor(v.shape(), 1.0, rng));
    }
    si.update(p0, &p1, &grads)?;
    si.consolidate(p0, &p1)?;
    let mut p2 = p1.clone();
    for (name, _) in p0.iter() {
        for x in p2.get_mut(name)?.values_mut() {
            *x += 0.01 * rng.normal();
        }
    }
    Ok((si, p2))
}

fn total_loss_suite(space: SpaceKind, rank: RankLoss, eps: f64, coords: usize, rng: &mut RngStream) -> Result<GradCheckReport> {
    let datasets = tiny_datasets()?;
    let ex = extractor_cfg(true);
    let enc = EncoderConfig {
        hidden: 8,
        gin_dropout: 0.2,
    };
    let spec = RankerSpec::new(space, ex, enc)?;
    let p0 = init_ranker(&spec, &mut rng.derive_str("init"))?;
    let (si, params) = consolidated(&p0, &mut rng.derive_str("si"))?;
    let mut crng = rng.derive_str("configs");
    let groups_in: Vec<(usize, Vec<Config>, Vec<f64>)> = (0..2)
        .map(|d| {
            let c = space_configs(space, 4, &mut crng)?;
            let aps = (0..c.len()).map(|_| crng.uniform(0.2, 0.8)).collect();
            Ok((d, c, aps))
        })
        .collect::<Result<_>>()?;
    let settings = LossSettings {
        rank,
        // A wide margin keeps the hinge active so its gradient is exercised.
        alpha: 50.0,
        ..LossSettings::default()
    };
    let build = |ps: &ParamStore| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let live = |tape: &mut Tape, d: usize, idx: &[usize]| extract_on_tape(tape, ps, &ex, &datasets[d], idx);
        let a = live(&mut tape, 0, &[0, 1, 2, 3, 4])?;
        let s = live(&mut tape, 0, &[5, 6, 7, 8, 9])?;
        let o = live(&mut tape, 1, &[0, 2, 4, 6, 8])?;
        let groups = groups_in
            .iter()
            .map(|(d, c, aps)| ScoredGroup {
                phi: if *d == 0 { a } else { o },
                configs: c.clone(),
                aps: aps.clone(),
            })
            .collect::<Vec<_>>();
        let mut drop = seeded_rng(99);
        let graph = build_loss(
            &mut tape,
            ps,
            &enc,
            &settings,
            &groups,
            Some(TripletVars { anchor: a, same: s, other: o }),
            Some(&si),
            Some(&mut drop),
        )?;
        let total = graph.total(&mut tape, &settings)?;
        Ok((tape, total))
    };
    finite_diff_check(build, &params, eps, coords, rng)
}

fn transform_suite(eps: f64) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(21);
    let d = 6;
    let rows = |rng: &mut RngStream| (0..12).map(|_| (0..d).map(|_| rng.normal()).collect()).collect::<Vec<Vec<f64>>>();
    let (old, cur) = (rows(&mut rng), rows(&mut rng));
    let mut z = TransformMatrix::identity(d, 1);
    z.z = random_tensor(&[d, d], 0.5, &mut rng);
    let analytic = z.gradient(&old, &cur)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for (i, g) in analytic.iter().enumerate() {
        let mut probe = z.clone();
        probe.z.values_mut()[i] += eps;
        let up = probe.loss(&old, &cur)?;
        probe.z.values_mut()[i] -= 2.0 * eps;
        let down = probe.loss(&old, &cur)?;
        let e = relative_error(*g, (up - down) / (2.0 * eps));
        report.checked += 1;
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some(("transform.z".into(), i));
        }
    }
    Ok(report)
}

/// Runs every suite with `coords` coordinates per parameter tensor.
pub fn gradcheck_suites(eps: f64, coords: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let root = seeded_rng(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, r: Result<GradCheckReport>| -> Result<()> {
        out.push(SuiteResult::new(name, r?));
        Ok(())
    };

    let mut rng = root.derive_str("affine");
    let mut s = ParamStore::new();
    init_affine(&mut s, "fc", 5, 4, &mut rng)?;
    let x = random_tensor(&[3, 5], 1.0, &mut rng);
    run(
        "affine",
        finite_diff_check(
            |ps| {
                let mut t = Tape::new();
                let xv = t.constant(x.clone());
                let y = affine(&mut t, ps, "fc", xv)?;
                let r = t.relu(y)?;
                let l = t.sum_squares(r)?;
                Ok((t, l))
            },
            &s,
            eps,
            coords,
            &mut rng,
        ),
    )?;

    let mut rng = root.derive_str("attention");
    let mut s = ParamStore::new();
    init_attention(&mut s, "enc", 8, &mut rng)?;
    let x = random_tensor(&[4, 8], 1.0, &mut rng);
    let target = (0..8).map(|_| rng.normal()).collect::<Vec<_>>();
    run(
        "attention",
        finite_diff_check(
            |ps| {
                let mut t = Tape::new();
                let xv = t.constant(x.clone());
                let y = self_attention_encoder(&mut t, ps, "enc", xv)?;
                let m = t.mean_rows(y)?;
                let l = t.mean_squared_error(m, target.clone())?;
                Ok((t, l))
            },
            &s,
            eps,
            coords,
            &mut rng,
        ),
    )?;

    let datasets = tiny_datasets()?;
    for (name, labels) in [("extractor", true), ("extractor-no-labels", false)] {
        let mut rng = root.derive_str(name);
        let cfg = extractor_cfg(labels);
        let mut s = ParamStore::new();
        init_extractor(&mut s, &cfg, &mut rng)?;
        run(
            name,
            finite_diff_check(
                |ps| {
                    let mut t = Tape::new();
                    let phi = extract_on_tape(&mut t, ps, &cfg, &datasets[1], &[0, 2, 3, 5, 9])?;
                    let l = t.sum_squares(phi)?;
                    Ok((t, l))
                },
                &s,
                eps,
                coords,
                &mut rng,
            ),
        )?;
    }

    for (name, space) in [("hpo-encoder", SpaceKind::Hpo), ("nas-encoder", SpaceKind::Nas)] {
        let mut rng = root.derive_str(name);
        let spec = RankerSpec::new(
            space,
            extractor_cfg(true),
            EncoderConfig {
                hidden: 8,
                gin_dropout: 0.2,
            },
        )?;
        let mut s = init_ranker(&spec, &mut rng)?.subset(crate::confenc::ENCODER_PREFIX);
        if let Ok(e) = s.get_mut("encoder.gin.0.eps") {
            e.values_mut()[0] = 0.3;
        }
        let configs = space_configs(space, 3, &mut rng)?;
        run(
            name,
            finite_diff_check(
                |ps| {
                    let mut t = Tape::new();
                    let mut drop = seeded_rng(5);
                    let h = crate::confenc::encode_configs(&mut t, ps, &spec.encoder, &configs, Some(&mut drop))?;
                    let l = t.sum_squares(h)?;
                    Ok((t, l))
                },
                &s,
                eps,
                coords,
                &mut rng,
            ),
        )?;
    }

    let mut rng = root.derive_str("losses");
    let mut s = ParamStore::new();
    s.insert("scores", random_tensor(&[7, 1], 1.0, &mut rng))?;
    s.insert("anchor", random_tensor(&[1, 6], 1.0, &mut rng))?;
    s.insert("same", random_tensor(&[1, 6], 1.0, &mut rng))?;
    s.insert("other", random_tensor(&[1, 6], 1.0, &mut rng))?;
    let groups = [0, 0, 0, 0, 1, 1, 1];
    let aps: Vec<f64> = (0..7).map(|_| rng.uniform(0.0, 1.0)).collect();
    run(
        "ranking-loss",
        finite_diff_check(
            |ps| {
                let mut t = Tape::new();
                let v = t.param(ps, "scores")?;
                let l = ranking_loss(&mut t, v, &groups, &aps)?;
                Ok((t, l))
            },
            &s,
            eps,
            coords,
            &mut rng,
        ),
    )?;
    run(
        "mse-loss",
        finite_diff_check(
            |ps| {
                let mut t = Tape::new();
                let v = t.param(ps, "scores")?;
                let l = mse_loss(&mut t, v, &aps)?;
                Ok((t, l))
            },
            &s,
            eps,
            coords,
            &mut rng,
        ),
    )?;
    run(
        "triplet-loss",
        finite_diff_check(
            |ps| {
                let mut t = Tape::new();
                let (a, p, o) = (t.param(ps, "anchor")?, t.param(ps, "same")?, t.param(ps, "other")?);
                let l = triplet_loss(&mut t, a, p, o, 20.0)?;
                Ok((t, l))
            },
            &s,
            eps,
            coords,
            &mut rng,
        ),
    )?;

    let mut rng = root.derive_str("si");
    let mut p0 = ParamStore::new();
    p0.insert("w", random_tensor(&[4, 3], 1.0, &mut rng))?;
    let (si, p) = consolidated(&p0, &mut rng)?;
    run(
        "si-penalty",
        finite_diff_check(
            |ps| {
                let mut t = Tape::new();
                let l = si.penalty(&mut t, ps)?.expect("importance is nonzero");
                Ok((t, l))
            },
            &p,
            eps,
            coords,
            &mut rng,
        ),
    )?;

    run("total-loss-hpo", total_loss_suite(SpaceKind::Hpo, RankLoss::Ndcg, eps, coords, &mut root.derive_str("total-hpo")))?;
    run("total-loss-nas", total_loss_suite(SpaceKind::Nas, RankLoss::Ndcg, eps, coords, &mut root.derive_str("total-nas")))?;
    run("total-loss-mse", total_loss_suite(SpaceKind::Hpo, RankLoss::Mse, eps, coords, &mut root.derive_str("total-mse")))?;
    run("transform", transform_suite(eps))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_on_a_few_coordinates() {
        let out = gradcheck_suites(DEFAULT_EPS, 4, 1).unwrap();
        assert_eq!(out.len(), 14);
        for r in &out {
            assert!(r.passes(TOLERANCE), "{r:?}");
            assert!(r.checked > 0, "{r:?}");
        }
    }
}
