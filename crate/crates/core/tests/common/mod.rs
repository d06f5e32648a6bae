//! Independent oracles shared by the property tests and the acceptance gate.

#![allow(dead_code)]

use std::collections::BTreeMap;

use luda::bench::{generate_source, PkSampler, Sample};
use luda::cluster::dbscan;
use luda::eval::{adjusted_rand_index, cmc_rank1_from, mean_average_precision_from, rank_by_similarity};
use luda::harness::{checked_terms, random_instance, Instance, RunConfig};
use luda::losses::{evaluate, BatchKind, LossSettings, LossSpec};
use luda::memory::{MemoryBuffer, MemoryConfig, MemoryPolicy};
use luda::losses::Batch;
use luda::model::{embed_all, ModelParams};
use luda::optim::{joint_gradient, meta_gradient, CdrConfig, Mode, StepPlan};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_COORDS: usize = 200;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random instances around a freshly initialized model on source batches.
pub fn instances(count: usize, seed: u64) -> (Vec<Instance>, LossSettings) {
    let cfg = RunConfig::default();
    let stream = cfg.stream.resolve(seed).unwrap();
    let source = generate_source(&stream).train;
    let mut r = rng(seed);
    let mut model = cfg.model.clone();
    model.num_classes = cfg.stream.source_ids;
    let out = (0..count)
        .map(|_| {
            let base = ModelParams::init(&model, &mut r).unwrap();
            random_instance(&base, &source, cfg.run.batch_ids, cfg.run.batch_instances, 0.05, &mut r).unwrap()
        })
        .collect();
    (out, cfg.losses)
}

fn loss_at(inst: &Instance, values: &[f64], spec: &LossSpec, settings: &LossSettings) -> f64 {
    let p = inst.params.with_values(values.to_vec()).unwrap();
    evaluate(&p, &inst.inputs(), spec, settings, false).unwrap().value
}

/// Batch-hard choices per anchor: hardest positive, hardest negative and
/// whether the hinge is active.
fn batch_hard_selection(params: &ModelParams, batch: &Batch, margin: f64) -> Vec<(usize, usize, bool)> {
    let inputs: Vec<&[f64]> = batch.inputs.iter().map(|x| x.as_slice()).collect();
    let units: Vec<Vec<f64>> = embed_all(params, &inputs)
        .unwrap()
        .into_iter()
        .map(|e| {
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            e.iter().map(|v| v / norm).collect()
        })
        .collect();
    let dist = |a: usize, b: usize| -> f64 {
        units[a].iter().zip(&units[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let n = units.len();
    (0..n)
        .map(|a| {
            let others = (0..n).filter(|&j| j != a);
            let pos = others
                .clone()
                .filter(|&j| batch.labels[j] == batch.labels[a])
                .max_by(|&i, &j| dist(a, i).total_cmp(&dist(a, j)))
                .unwrap();
            let neg = others
                .filter(|&j| batch.labels[j] != batch.labels[a])
                .min_by(|&i, &j| dist(a, i).total_cmp(&dist(a, j)))
                .unwrap();
            (pos, neg, dist(a, pos) - dist(a, neg) + margin > 0.0)
        })
        .collect()
}

fn selections(inst: &Instance, values: &[f64], margin: f64) -> Vec<Vec<(usize, usize, bool)>> {
    let p = inst.params.with_values(values.to_vec()).unwrap();
    [&inst.new, &inst.old].iter().map(|b| batch_hard_selection(&p, b, margin)).collect()
}

pub struct GradientReport {
    pub term: &'static str,
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose central-difference segment crosses a batch-hard
    /// selection change, where the loss is not differentiable.
    pub kinks: usize,
}

/// Worst relative error between analytic and central-difference gradients,
/// per objective, over `count` instances and `FD_COORDS` random coordinates
/// each. Coordinates whose ±h segment changes the batch-hard selection are
/// counted separately instead of compared.
pub fn gradient_check(count: usize, seed: u64) -> Vec<GradientReport> {
    let (insts, settings) = instances(count, seed);
    let mut r = rng(seed ^ 0x5eed);
    checked_terms()
        .into_iter()
        .map(|(term, spec)| {
            let mut report = GradientReport {
                term,
                worst: 0.0,
                checked: 0,
                kinks: 0,
            };
            for inst in &insts {
                let analytic = evaluate(&inst.params, &inst.inputs(), &spec, &settings, true)
                    .unwrap()
                    .gradient
                    .unwrap();
                let n = analytic.len();
                let coords = sample(&mut r, n, FD_COORDS.min(n));
                let mut x = inst.params.values().to_vec();
                let centre = selections(inst, &x, settings.margin);
                for i in coords {
                    let orig = x[i];
                    x[i] = orig + FD_STEP;
                    let up = loss_at(inst, &x, &spec, &settings);
                    let smooth_up = selections(inst, &x, settings.margin) == centre;
                    x[i] = orig - FD_STEP;
                    let down = loss_at(inst, &x, &spec, &settings);
                    let smooth_down = selections(inst, &x, settings.margin) == centre;
                    x[i] = orig;
                    if !(smooth_up && smooth_down) {
                        report.kinks += 1;
                        continue;
                    }
                    let numeric = (up - down) / (2.0 * FD_STEP);
                    let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
                    report.worst = report.worst.max(err);
                    report.checked += 1;
                }
            }
            report
        })
        .collect()
}

pub fn cdr_rcl_plan() -> StepPlan {
    CdrConfig {
        mode: Mode::CdrRcl,
        ..CdrConfig::default()
    }
    .plan()
}

/// Largest coordinate difference between the zero-step coordinated gradient
/// and the joint gradient.
pub fn alpha_zero_gap(count: usize, seed: u64) -> f64 {
    let (insts, settings) = instances(count, seed);
    let plan = cdr_rcl_plan();
    insts
        .iter()
        .map(|inst| {
            let m = meta_gradient(&inst.params, &inst.inputs(), &plan, 0.0, &settings).unwrap();
            let j = joint_gradient(&inst.params, &inst.inputs(), &plan, &settings).unwrap();
            m.total
                .iter()
                .zip(&j.total)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of `remainder(alpha) / remainder(alpha / 2)` for each alpha, where
/// the remainder is the gap between the anti-forgetting loss after an inner
/// step and its first-order expansion.
pub fn taylor_ratios(count: usize, seed: u64, alphas: &[f64]) -> Vec<f64> {
    let (insts, settings) = instances(count, seed);
    let plan = cdr_rcl_plan();
    let mut ratios = vec![Vec::new(); alphas.len()];
    for inst in &insts {
        let inputs = inst.inputs();
        let train = evaluate(&inst.params, &inputs, &plan.meta_train, &settings, true).unwrap();
        let test = evaluate(&inst.params, &inputs, &plan.meta_test, &settings, true).unwrap();
        let (g1, g2) = (train.gradient.unwrap(), test.gradient.unwrap());
        let dp: f64 = g1.iter().zip(&g2).map(|(a, b)| a * b).sum();
        let remainder = |alpha: f64| {
            let moved: Vec<f64> = inst.params.values().iter().zip(&g1).map(|(p, g)| p - alpha * g).collect();
            let lhs = loss_at(inst, &moved, &plan.meta_test, &settings);
            (lhs - (test.value - alpha * dp)).abs()
        };
        for (k, &a) in alphas.iter().enumerate() {
            ratios[k].push(remainder(a) / remainder(a / 2.0));
        }
    }
    ratios.into_iter().map(median).collect()
}

fn labeled(id: usize, count: usize, index: usize) -> Vec<Sample> {
    (0..count)
        .map(|k| {
            let mut s = Sample::new(vec![1.0 + k as f64], id as u64, "A", 1, index + k);
            s.label = Some(id);
            s
        })
        .collect()
}

pub struct ReservoirStats {
    pub min_freq: f64,
    pub max_freq: f64,
    pub max_ids: usize,
}

/// Offers `offered` distinct identities to an ID-wise reservoir of capacity
/// `capacity` in each of `replays` seeded replays.
pub fn id_reservoir(capacity: usize, offered: usize, replays: u64) -> ReservoirStats {
    let cfg = MemoryConfig {
        policy: MemoryPolicy::IdRs,
        capacity_ids: capacity,
        per_id_cap: 2,
    };
    let mut counts = vec![0u64; offered];
    let mut max_ids = 0;
    let data: Vec<Vec<Sample>> = (0..offered).map(|id| labeled(id, 2, 2 * id)).collect();
    for replay in 0..replays {
        let mut m = MemoryBuffer::new(cfg.clone(), replay).unwrap();
        for (id, samples) in data.iter().enumerate() {
            m.offer(id, samples).unwrap();
            max_ids = max_ids.max(m.num_ids());
        }
        for l in m.resident_labels() {
            counts[l] += 1;
        }
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / replays as f64).collect();
    ReservoirStats {
        min_freq: freq.iter().copied().fold(f64::INFINITY, f64::min),
        max_freq: freq.iter().copied().fold(0.0, f64::max),
        max_ids,
    }
}

/// Per-sample inclusion frequencies for the instance-wise reservoir, plus
/// the largest resident sample count observed.
pub fn instance_reservoir(capacity_ids: usize, per_id: usize, offered: usize, replays: u64) -> (Vec<f64>, usize) {
    let cfg = MemoryConfig {
        policy: MemoryPolicy::InstanceRs,
        capacity_ids,
        per_id_cap: per_id,
    };
    let data: Vec<Vec<Sample>> = (0..offered).map(|id| labeled(id, per_id, per_id * id)).collect();
    let mut counts = vec![0u64; offered * per_id];
    let mut max_samples = 0;
    for replay in 0..replays {
        let mut m = MemoryBuffer::new(cfg.clone(), replay).unwrap();
        for (id, samples) in data.iter().enumerate() {
            m.offer(id, samples).unwrap();
            max_samples = max_samples.max(m.num_samples());
        }
        for l in m.resident_labels() {
            for s in m.samples_of(l).unwrap() {
                counts[s.index] += 1;
            }
        }
    }
    (counts.iter().map(|&c| c as f64 / replays as f64).collect(), max_samples)
}

/// Label selection frequencies of the PK sampler over `draws` batches.
pub fn pk_frequencies(labels: usize, p: usize, draws: usize, seed: u64) -> Vec<f64> {
    let mut samples = Vec::new();
    let mut assigned = Vec::new();
    for l in 0..labels {
        for k in 0..3 {
            samples.push(Sample::new(vec![1.0, k as f64], l as u64, "A", 1, samples.len()));
            assigned.push(Some(l));
        }
    }
    let sampler = PkSampler::new(&assigned);
    let mut r = rng(seed);
    let mut counts = vec![0usize; labels];
    for _ in 0..draws {
        let b = sampler.sample(&samples, p, 4, BatchKind::New, &mut r).unwrap();
        let mut picked = b.labels.clone();
        picked.dedup();
        assert_eq!(picked.len(), p, "labels within a batch are contiguous and distinct");
        for l in picked {
            counts[l] += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / draws as f64).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Brute-force rank-1 and mAP: each gallery item's rank is one plus the
/// number of items that beat it (higher similarity, or equal with a lower index).
fn brute_force_metrics(queries: &[Vec<f64>], gallery: &[Vec<f64>], relevance: &[Vec<bool>]) -> (f64, f64) {
    let mut rank1 = 0.0;
    let mut map = 0.0;
    for (q, rel) in queries.iter().zip(relevance) {
        let sims: Vec<f64> = gallery.iter().map(|g| cosine(q, g)).collect();
        let beats = |a: usize, b: usize| sims[a] > sims[b] || (sims[a] == sims[b] && a < b);
        let rank = |g: usize| 1 + (0..gallery.len()).filter(|&o| o != g && beats(o, g)).count();
        let top = (0..gallery.len()).find(|&g| rank(g) == 1).unwrap();
        if rel[top] {
            rank1 += 1.0;
        }
        let mut positives: Vec<usize> = (0..gallery.len()).filter(|&g| rel[g]).map(rank).collect();
        positives.sort_unstable();
        let mut ap = 0.0;
        for (hits, r) in positives.iter().enumerate() {
            ap += (hits + 1) as f64 / *r as f64;
        }
        map += ap / positives.len() as f64;
    }
    (rank1 / queries.len() as f64, map / queries.len() as f64)
}

/// Number of random tiny splits on which the library metrics differ from
/// the brute-force ones.
pub fn metric_mismatches(splits: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..splits {
        let ids = r.random_range(2..5u64);
        let dim = r.random_range(2..5);
        let nq = r.random_range(1..5);
        let ng = r.random_range(ids as usize..10);
        let vec = |r: &mut ChaCha8Rng| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let qid: Vec<u64> = (0..nq).map(|_| r.random_range(0..ids)).collect();
        let mut gid: Vec<u64> = (0..ids).collect();
        gid.extend((ids as usize..ng).map(|_| r.random_range(0..ids)));
        let queries: Vec<Vec<f64>> = (0..nq).map(|_| vec(&mut r)).collect();
        let gallery: Vec<Vec<f64>> = (0..gid.len()).map(|_| vec(&mut r)).collect();
        let relevance: Vec<Vec<bool>> = qid.iter().map(|q| gid.iter().map(|g| g == q).collect()).collect();
        let rankings = rank_by_similarity(&queries, &gallery);
        let got = (
            cmc_rank1_from(&rankings, &relevance),
            mean_average_precision_from(&rankings, &relevance).unwrap(),
        );
        if got != brute_force_metrics(&queries, &gallery, &relevance) {
            bad += 1;
        }
    }
    bad
}

/// DBSCAN by definition: core points from the full distance matrix,
/// clusters as connected components of the core graph, each border point
/// joined to the cluster of its lowest-index core neighbour.
pub fn brute_force_dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let dist = |i: usize, j: usize| {
        points[i]
            .iter()
            .zip(&points[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let near: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| dist(i, j) <= eps).collect()).collect();
    let core: Vec<bool> = near.iter().map(|row| row.iter().filter(|&&b| b).count() >= min_pts).collect();
    let mut comp: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if core[i] && core[j] && near[i][j] && comp[j] < comp[i] {
                    comp[i] = comp[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                Some(comp[i])
            } else {
                (0..n).find(|&j| core[j] && near[i][j]).map(|j| comp[j])
            }
        })
        .collect()
}

/// True when both labelings induce the same partition and the same noise set.
pub fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    let mut fwd = BTreeMap::new();
    let mut back = BTreeMap::new();
    a.iter().zip(b).all(|(x, y)| match (x, y) {
        (None, None) => true,
        (Some(x), Some(y)) => *fwd.entry(*x).or_insert(*y) == *y && *back.entry(*y).or_insert(*x) == *x,
        _ => false,
    })
}

/// Number of random small instances on which DBSCAN disagrees with the
/// brute-force reference.
pub fn dbscan_mismatches(instances: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..instances)
        .filter(|_| {
            let n = r.random_range(5..40);
            let dim = r.random_range(1..4);
            let eps = r.random_range(0.05..0.4);
            let min_pts = r.random_range(2..6);
            let points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.random::<f64>()).collect()).collect();
            let got = dbscan(&points, eps, min_pts).assignment;
            !same_partition(&got, &brute_force_dbscan(&points, eps, min_pts))
        })
        .count()
}

/// ARI between DBSCAN and generating identities for well separated blobs.
pub fn dbscan_blob_ari(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (ids, per_id, eps) = (6, 12, 0.5);
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for id in 0..ids {
        let centre: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0) * 100.0).collect();
        for _ in 0..per_id {
            points.push(centre.iter().map(|c| c + r.random_range(-0.05..0.05)).collect::<Vec<f64>>());
            truth.push(Some(id));
        }
    }
    let got = dbscan(&points, eps, 4).assignment;
    adjusted_rand_index(&got, &truth)
}
