//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs single-threaded.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jacmorph::image::{Geometry, Image3D, Mask3D};
use jacmorph::jacobian::{evaluate_case, evaluate_cohort, jacobian_integral_change, jacobian_map, pearson, CaseEvaluation};
use jacmorph::phantom::{make_cohort, make_sphere_phantom, random_octants, PhantomCase, PhantomSpec};
use jacmorph::pipeline::{run_pipeline, PipelineConfig};
use jacmorph::radiomics::{extract_all, glcm, glcm_features, glrlm, unit_offsets, QuantizedRoi};
use jacmorph::registration::{register, similarity_gradient, BSplineLattice, Channel, DeformationField, Engine, RegistrationConfig, RegistrationMasks, RegistrationResult};
use jacmorph::stats::{auc, cross_validate, wilcoxon_rank_sum, CaseTable, CvConfig};

struct Outcome {
    id: u32,
    title: &'static str,
    pass: bool,
    summary: String,
}

fn detail(s: impl AsRef<str>) {
    println!("    {}", s.as_ref());
}

fn blend_cfg() -> RegistrationConfig {
    RegistrationConfig::for_channel(Channel::Blend)
}

fn register_case(case: &PhantomCase, engine: Engine) -> jacmorph::Result<RegistrationResult> {
    let masks = RegistrationMasks { fixed: Some(&case.baseline_mask), moving: Some(&case.followup_mask) };
    register(&case.baseline_img, &case.followup_img, engine, &blend_cfg(), masks)
}

/// Voxels within `margin` mm of the mask's centroid sphere support.
fn support(mask: &Mask3D, radius: f64) -> Mask3D {
    let c = mask.centroid().unwrap();
    Mask3D::from_fn(*mask.geometry(), |p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt() <= radius)
}

fn mean_norm_in(vectors: &[[f64; 3]], region: &Mask3D) -> f64 {
    let (s, n) = vectors
        .iter()
        .zip(region.data())
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt(), n + 1));
    s / n as f64
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let g = Geometry::cube(64, 2.0).unwrap();
    let c = [63.0; 3];
    let field = DeformationField::from_fn(g, |p| [0, 1, 2].map(|a| (0.8 - 1.0) * (p[a] - c[a])));
    let t = Instant::now();
    let j = jacobian_map(&field);
    let secs = t.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    for k in 1..63 {
        for jj in 1..63 {
            for i in 1..63 {
                worst = worst.max((j.at(i, jj, k) - 0.512).abs());
            }
        }
    }
    Outcome {
        id: 1,
        title: "analytic Jacobian of 0.8 contraction",
        pass: worst <= 1e-6 && secs < 1.0,
        summary: format!("max |J - 0.512| = {worst:.2e} (tol 1e-6), {secs:.3} s at 64^3 (limit 1 s)"),
    }
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let spec = PhantomSpec { noise_sd: 0.02, seed: 11, ..PhantomSpec::default() };
    let case = make_sphere_phantom(&spec).unwrap();
    let voxel = spec.grid.min_spacing();
    let mut pass = true;
    let mut parts = Vec::new();
    for engine in [Engine::Bsd, Engine::Ffd] {
        let masks = RegistrationMasks { fixed: Some(&case.baseline_mask), moving: Some(&case.baseline_mask) };
        match register(&case.baseline_img, &case.baseline_img, engine, &blend_cfg(), masks) {
            Ok(res) => {
                let max_u = res.forward_field.max_norm() / voxel;
                let change = jacobian_integral_change(&jacobian_map(&res.forward_field), &case.baseline_mask).unwrap();
                let (_, dsc) = evaluate_case(&res.forward_field, &case.baseline_mask, &case.baseline_mask).unwrap();
                let ok = max_u < 0.1 && change.abs() < 1.0 && dsc == 1.0;
                pass &= ok;
                parts.push(format!("{}: max|u| {max_u:.2e} vox, change {change:.3}%, DSC {dsc}", engine.name()));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{}: error {e}", engine.name()));
            }
        }
    }
    Outcome { id: 2, title: "identity registration", pass, summary: parts.join("; ") }
}

// ---------------------------------------------------------------- 3 and 4

struct CohortRun {
    cases: Vec<PhantomCase>,
    bsd: Vec<Option<RegistrationResult>>,
    bsd_seconds: f64,
    rows_bsd: Vec<CaseEvaluation>,
    rows_ffd: Vec<CaseEvaluation>,
    failures: Vec<String>,
}

fn run_cohort() -> CohortRun {
    let cases = make_cohort(20, (10.0, 80.0), 42).unwrap();
    let mut failures = Vec::new();
    let mut rows_bsd = Vec::new();
    let mut bsd = Vec::new();
    let t = Instant::now();
    for (i, case) in cases.iter().enumerate() {
        match register_case(case, Engine::Bsd) {
            Ok(res) => {
                let (est, dsc) = evaluate_case(&res.forward_field, &case.baseline_mask, &case.followup_mask).unwrap();
                rows_bsd.push(CaseEvaluation { case_id: format!("case_{i:03}"), est_change_pct: est, gt_change_pct: case.true_change_pct, dsc });
                bsd.push(Some(res));
            }
            Err(e) => {
                failures.push(format!("bsd case {i}: {e}"));
                bsd.push(None);
            }
        }
    }
    let bsd_seconds = t.elapsed().as_secs_f64();
    let mut rows_ffd = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        match register_case(case, Engine::Ffd) {
            Ok(res) => {
                let (est, dsc) = evaluate_case(&res.forward_field, &case.baseline_mask, &case.followup_mask).unwrap();
                rows_ffd.push(CaseEvaluation { case_id: format!("case_{i:03}"), est_change_pct: est, gt_change_pct: case.true_change_pct, dsc });
            }
            Err(e) => failures.push(format!("ffd case {i}: {e}")),
        }
    }
    CohortRun { cases, bsd, bsd_seconds, rows_bsd, rows_ffd, failures }
}

fn r_above(rows: &[CaseEvaluation], threshold: f64) -> Option<f64> {
    let sub: Vec<&CaseEvaluation> = rows.iter().filter(|r| r.gt_change_pct > threshold).collect();
    let est: Vec<f64> = sub.iter().map(|r| r.est_change_pct).collect();
    let gt: Vec<f64> = sub.iter().map(|r| r.gt_change_pct).collect();
    pearson(&est, &gt).ok()
}

fn criterion_3(run: &CohortRun) -> Outcome {
    for f in &run.failures {
        detail(f);
    }
    for (b, f) in run.rows_bsd.iter().zip(&run.rows_ffd) {
        detail(format!(
            "{} gt {:5.1}  bsd {:5.1} (DSC {:.3})  ffd {:5.1} (DSC {:.3})",
            b.case_id, b.gt_change_pct, b.est_change_pct, b.dsc, f.est_change_pct, f.dsc
        ));
    }
    let complete = run.failures.is_empty() && run.rows_bsd.len() == 20;
    let Ok(bsd) = evaluate_cohort(&run.rows_bsd) else {
        return Outcome { id: 3, title: "phantom cohort", pass: false, summary: "BSD cohort could not be evaluated".into() };
    };
    let ffd = evaluate_cohort(&run.rows_ffd).ok();
    let r_bsd = bsd.pearson_r.unwrap_or(f64::NAN);
    let (hb, hf) = (r_above(&run.rows_bsd, 50.0), r_above(&run.rows_ffd, 50.0));
    let n_high = run.rows_bsd.iter().filter(|r| r.gt_change_pct > 50.0).count();
    if let Some(f) = &ffd {
        detail(format!(
            "FFD full cohort: r {:.4}, mean |diff| {:.2} pts, DSC {:.3}",
            f.pearson_r.unwrap_or(f64::NAN),
            f.mean_abs_diff_pct,
            f.dsc_mean
        ));
    }
    detail(format!(
        "shrinkage > 50% ({n_high} cases): r BSD {:.4}, r FFD {:.4}",
        hb.unwrap_or(f64::NAN),
        hf.unwrap_or(f64::NAN)
    ));
    let checks = [
        ("all 20 cases registered", complete),
        ("BSD r >= 0.90", r_bsd >= 0.90),
        ("BSD mean |diff| <= 10", bsd.mean_abs_diff_pct <= 10.0),
        ("BSD mean DSC >= 0.80", bsd.dsc_mean >= 0.80),
        ("FFD r < BSD r above 50%", matches!((hb, hf), (Some(b), Some(f)) if f < b)),
        ("BSD cohort < 20 min", run.bsd_seconds < 1200.0),
    ];
    for (name, ok) in &checks {
        detail(format!("{} {name}", if *ok { "ok  " } else { "MISS" }));
    }
    Outcome {
        id: 3,
        title: "phantom cohort (20 cases, 10-80% shrinkage)",
        pass: checks.iter().all(|c| c.1),
        summary: format!(
            "BSD r {r_bsd:.4}, mean |diff| {:.2} pts, DSC {:.3}; r above 50%: BSD {:.4} vs FFD {:.4}; BSD time {:.0} s",
            bsd.mean_abs_diff_pct,
            bsd.dsc_mean,
            hb.unwrap_or(f64::NAN),
            hf.unwrap_or(f64::NAN),
            run.bsd_seconds
        ),
    }
}

fn criterion_4(run: &CohortRun) -> Outcome {
    let voxel = run.cases[0].spec.grid.min_spacing();
    let mut min_j = f64::INFINITY;
    let mut worst_ice: f64 = 0.0;
    let mut n = 0;
    for (case, res) in run.cases.iter().zip(&run.bsd) {
        let Some(res) = res else { continue };
        n += 1;
        let jf = jacobian_map(&res.forward_field).min_max().0;
        let ji = jacobian_map(&res.inverse_field).min_max().0;
        min_j = min_j.min(jf).min(ji);
        let region = support(&case.baseline_mask, 2.0 * case.spec.baseline_radius);
        let composed = res.inverse_field.then(&res.forward_field);
        worst_ice = worst_ice.max(mean_norm_in(composed.vectors(), &region) / voxel);
    }
    detail(format!("{n} BSD results: min J over forward and inverse fields {min_j:.4}"));
    detail(format!("worst inverse-consistency error within 2R of the tumour: {worst_ice:.4} voxel"));

    let mut worst_swap: f64 = 0.0;
    for idx in [2usize, 8, 14, 19] {
        let case = &run.cases[idx];
        let Some(res) = &run.bsd[idx] else { continue };
        let masks = RegistrationMasks { fixed: Some(&case.followup_mask), moving: Some(&case.baseline_mask) };
        match register(&case.followup_img, &case.baseline_img, Engine::Bsd, &blend_cfg(), masks) {
            Ok(swapped) => {
                let region = support(&case.followup_mask, 2.0 * case.spec.baseline_radius);
                let diff: Vec<[f64; 3]> = swapped
                    .forward_field
                    .vectors()
                    .iter()
                    .zip(res.inverse_field.vectors())
                    .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
                    .collect();
                let d = mean_norm_in(&diff, &region) / voxel;
                detail(format!("case {idx} (gt {:.1}%): swapped forward vs inverse {d:.4} voxel", case.true_change_pct));
                worst_swap = worst_swap.max(d);
            }
            Err(e) => {
                detail(format!("case {idx}: swapped registration failed: {e}"));
                worst_swap = f64::INFINITY;
            }
        }
    }
    Outcome {
        id: 4,
        title: "diffeomorphism and symmetry (BSD)",
        pass: n == run.cases.len() && min_j > 0.0 && worst_ice < 0.5 && worst_swap < 0.5,
        summary: format!("min J {min_j:.4} (> 0), worst ICE {worst_ice:.4} vox (< 0.5), worst swap mismatch {worst_swap:.4} vox (< 0.5)"),
    }
}

// ---------------------------------------------------------------- 5

fn blob(g: Geometry, c: [f64; 3], r: f64) -> Image3D {
    Image3D::from_fn(g, |p| {
        let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
        0.1 + 0.8 * (-d2 / (2.0 * r * r)).exp()
    })
}

fn criterion_5() -> Outcome {
    let g = Geometry::cube(8, 1.0).unwrap();
    let fixed = blob(g, [3.6, 3.4, 3.5], 2.2);
    let moving = blob(g, [3.9, 3.2, 3.7], 2.0);
    let lattice = BSplineLattice::new(g, 3.0).unwrap();
    let base: Vec<[f64; 3]> = (0..lattice.n_ctrl()).map(|i| [0.3, 0.2 - 0.01 * (i % 5) as f64, 0.1]).collect();
    let bins = 16;
    let (_, grad) = similarity_gradient(&fixed, &moving, &lattice, &base, bins).unwrap();
    let scale = grad.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let eps = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0);
    for idx in 0..lattice.n_ctrl() {
        for c in 0..3 {
            let an = grad[idx][c];
            if an.abs() < 1e-3 * scale {
                continue;
            }
            let mut plus = base.clone();
            plus[idx][c] += eps;
            let mut minus = base.clone();
            minus[idx][c] -= eps;
            let fp = similarity_gradient(&fixed, &moving, &lattice, &plus, bins).unwrap().0;
            let fm = similarity_gradient(&fixed, &moving, &lattice, &minus, bins).unwrap().0;
            let fd = (fp - fm) / (2.0 * eps);
            worst = worst.max((fd - an).abs() / an.abs());
            checked += 1;
        }
    }
    Outcome {
        id: 5,
        title: "MI gradient vs central differences (8^3)",
        pass: checked > 0 && worst <= 1e-3,
        summary: format!("{checked} control-point components, worst relative error {worst:.2e} (tol 1e-3)"),
    }
}

// ---------------------------------------------------------------- 6

fn brute_glcm(q: &QuantizedRoi, o: [i64; 3]) -> Option<DMatrix<f64>> {
    let [nx, ny, nz] = q.dims;
    let vox: Vec<([i64; 3], u16)> = (0..nz)
        .flat_map(|k| (0..ny).flat_map(move |j| (0..nx).map(move |i| (i, j, k))))
        .map(|(i, j, k)| ([i as i64, j as i64, k as i64], q.labels[i + nx * (j + ny * k)]))
        .filter(|(_, l)| *l > 0)
        .collect();
    let mut m = DMatrix::<f64>::zeros(q.n_bins, q.n_bins);
    let mut total = 0.0;
    for (p, a) in &vox {
        for (r, b) in &vox {
            let d = [r[0] - p[0], r[1] - p[1], r[2] - p[2]];
            if d == o || d == [-o[0], -o[1], -o[2]] {
                m[(*a as usize - 1, *b as usize - 1)] += 1.0;
                total += 1.0;
            }
        }
    }
    (total > 0.0).then(|| m / total)
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    parent[x] = r;
    r
}

/// Runs as connected components of same-label neighbours along `d`.
fn brute_glrlm(q: &QuantizedRoi, d: [i64; 3]) -> DMatrix<f64> {
    let [nx, ny, nz] = q.dims;
    let n = q.labels.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for k in 0..nz as i64 {
        for j in 0..ny as i64 {
            for i in 0..nx as i64 {
                let (a, b, c) = (i + d[0], j + d[1], k + d[2]);
                if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                    continue;
                }
                let p = (i + nx as i64 * (j + ny as i64 * k)) as usize;
                let r = (a + nx as i64 * (b + ny as i64 * c)) as usize;
                if q.labels[p] > 0 && q.labels[p] == q.labels[r] {
                    let (rp, rr) = (find(&mut parent, p), find(&mut parent, r));
                    parent[rp] = rr;
                }
            }
        }
    }
    let mut sizes: HashMap<usize, (u16, usize)> = HashMap::new();
    for p in 0..n {
        if q.labels[p] > 0 {
            let root = find(&mut parent, p);
            sizes.entry(root).or_insert((q.labels[p], 0)).1 += 1;
        }
    }
    let max_run = nx.max(ny).max(nz);
    let mut m = DMatrix::<f64>::zeros(q.n_bins, max_run);
    for (label, len) in sizes.values() {
        m[(*label as usize - 1, len - 1)] += 1.0;
    }
    m
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut matrices = 0;
    for _ in 0..100 {
        let dims = [rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5)];
        let n: usize = dims.iter().product();
        let fill = rng.random_range(0.3..1.0);
        let mut labels: Vec<u16> = (0..n).map(|_| if rng.random_bool(fill) { rng.random_range(1..=3) } else { 0 }).collect();
        if labels.iter().all(|&l| l == 0) {
            labels[0] = 1;
        }
        let q = QuantizedRoi::from_labels(dims, labels, 3).unwrap();
        for o in unit_offsets() {
            let ours = glcm(&q, o).ok();
            matrices += 2;
            if ours != brute_glcm(&q, o) {
                mismatches += 1;
            }
            if glrlm(&q, o).unwrap() != brute_glrlm(&q, o) {
                mismatches += 1;
            }
        }
    }
    let f = glcm_features(&DMatrix::from_element(2, 2, 0.25));
    let ent_err = (f.get("Entropy").unwrap() - 4f64.ln()).abs();
    let en_err = (f.get("Energy").unwrap() - 0.25).abs();
    Outcome {
        id: 6,
        title: "texture matrices vs brute force",
        pass: mismatches == 0 && ent_err <= 1e-12 && en_err <= 1e-12,
        summary: format!(
            "{matrices} GLCM/GLRLM matrices over 100 random ROIs: {mismatches} mismatches; uniform 4-cell entropy err {ent_err:.1e}, energy err {en_err:.1e}"
        ),
    }
}

// ---------------------------------------------------------------- 7

fn pair_u(a: &[f64], b: &[f64]) -> f64 {
    a.iter().flat_map(|x| b.iter().map(move |y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 })).sum()
}

fn permutation_p(a: &[f64], b: &[f64]) -> f64 {
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let (n, k) = (all.len(), a.len());
    let centre = (a.len() * b.len()) as f64 / 2.0;
    let observed = (pair_u(a, b) - centre).abs();
    let (mut hits, mut total) = (0u32, 0u32);
    let mut choose = |mask: u32| {
        let (x, y): (Vec<f64>, Vec<f64>) = (0..n).fold((vec![], vec![]), |(mut x, mut y), i| {
            if mask >> i & 1 == 1 { x.push(all[i]) } else { y.push(all[i]) }
            (x, y)
        });
        total += 1;
        if (pair_u(&x, &y) - centre).abs() >= observed - 1e-9 {
            hits += 1;
        }
    };
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == k {
            choose(mask);
        }
    }
    hits as f64 / total as f64
}

fn null_table(seed: u64, signal: bool) -> CaseTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 40;
    let p = 20;
    let mut labels: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    labels.shuffle(&mut rng);
    let rows = labels
        .iter()
        .map(|&l| {
            let mut r: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            if signal {
                r[3] = if l { 1.0 } else { -1.0 } + rng.random_range(-0.6..0.6);
            }
            r
        })
        .collect();
    CaseTable::new((0..n).map(|i| format!("c{i:02}")).collect(), (0..p).map(|j| format!("f{j:02}")).collect(), rows, labels).unwrap()
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let textbook = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    let mut worst_exact: f64 = (textbook - 0.1).abs();
    let mut splits = 0;
    for n in 2..=12usize {
        for n1 in 1..n {
            for rep in 0..2 {
                let draw = |rng: &mut ChaCha8Rng, m: usize| -> Vec<f64> {
                    (0..m).map(|_| if rep == 0 { rng.random_range(0.0..1.0) } else { rng.random_range(0..4) as f64 }).collect()
                };
                let a = draw(&mut rng, n1);
                let b = draw(&mut rng, n - n1);
                let ours = wilcoxon_rank_sum(&a, &b).unwrap();
                worst_exact = worst_exact.max((ours - permutation_p(&a, &b)).abs());
                splits += 1;
            }
        }
    }
    detail(format!("exact path: {splits} splits (continuous and tied data), worst |p - permutation p| {worst_exact:.2e}; {{1,2,3}} vs {{4,5,6}} -> {textbook}"));

    let mut worst_auc: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let pos: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
        let neg: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
        let expect = pair_u(&pos, &neg) / (pos.len() * neg.len()) as f64;
        worst_auc = worst_auc.max((auc(&scores, &labels).unwrap() - expect).abs());
    }
    detail(format!("auc vs U/(n1 n2) on 1000 random instances: worst difference {worst_auc:.2e}"));

    let cfg = CvConfig { curve: false, ..CvConfig::default() };
    let mut null_acc = Vec::new();
    for seed in 0..10 {
        let rep = cross_validate(&null_table(100 + seed, false), &CvConfig { seed, ..cfg.clone() }).unwrap();
        null_acc.push(rep.accuracy.mean);
    }
    let null_mean = null_acc.iter().sum::<f64>() / null_acc.len() as f64;
    let outside = null_acc.iter().filter(|a| !(0.35..=0.65).contains(*a)).count();
    let null_ok = (0.35..=0.65).contains(&null_mean);
    detail(format!(
        "null-label accuracy per seed: {} ({outside} of 10 outside [0.35, 0.65])",
        null_acc.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")
    ));
    let sep = cross_validate(&null_table(7, true), &CvConfig::default()).unwrap();
    detail(format!(
        "separable table: accuracy {:.3}, AUC {:.3}, top feature {}",
        sep.accuracy.mean, sep.auc.mean, sep.feature_frequency[0].0
    ));
    Outcome {
        id: 7,
        title: "statistics oracles",
        pass: worst_exact < 1e-12 && worst_auc < 1e-12 && null_ok && sep.accuracy.mean >= 0.95,
        summary: format!(
            "exact-vs-enumeration {worst_exact:.1e}, auc identity {worst_auc:.1e}, null accuracy over 10 seeds {null_mean:.3} (range {:.3}..{:.3}), separable accuracy {:.3}",
            null_acc.iter().copied().fold(f64::INFINITY, f64::min),
            null_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            sep.accuracy.mean
        ),
    }
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = 0.6f64.cbrt();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut failures = 0;
    for i in 0..20u64 {
        let heterogeneous = i % 2 == 0;
        let spec = PhantomSpec {
            shrink_factor: s,
            noise_sd: 0.02,
            seed: 1000 + i,
            heterogeneity: heterogeneous.then(|| random_octants(&mut rng, 0.2)),
            ..PhantomSpec::default()
        };
        let case = make_sphere_phantom(&spec).unwrap();
        match register_case(&case, Engine::Bsd) {
            Ok(res) => {
                let fv = extract_all(&jacobian_map(&res.forward_field), &case.baseline_mask, 32).unwrap();
                let shade = fv.get("Mean Cluster Shade").unwrap();
                detail(format!(
                    "{} true change {:.1}%: Mean Cluster Shade {shade:.2}",
                    if heterogeneous { "heterogeneous" } else { "uniform      " },
                    case.true_change_pct
                ));
                scores.push(shade);
                labels.push(heterogeneous);
            }
            Err(e) => {
                detail(format!("case {i}: {e}"));
                failures += 1;
            }
        }
    }
    let raw = auc(&scores, &labels).unwrap_or(0.5);
    let oriented = raw.max(1.0 - raw);
    let p = {
        let pos: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| l).map(|(&v, _)| v).collect();
        let neg: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| !l).map(|(&v, _)| v).collect();
        wilcoxon_rank_sum(&pos, &neg).unwrap_or(1.0)
    };
    Outcome {
        id: 8,
        title: "heterogeneity discrimination by Mean Cluster Shade",
        pass: failures == 0 && oriented >= 0.8,
        summary: format!(
            "AUC {oriented:.3} (>= 0.8), higher in the {} group, rank-sum p {p:.2e}",
            if raw >= 0.5 { "heterogeneous" } else { "uniform" }
        ),
    }
}

// ---------------------------------------------------------------- 9

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")) {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut cfg = PipelineConfig::default();
    cfg.cohort.n_cases = 8;
    cfg.cohort.grid_size = 32;
    cfg.cohort.radius = 10.0;
    cfg.cohort.seed = 9;
    cfg.io.output_dir = out.clone();
    cfg.io.write_volumes = false;
    let mut snaps = Vec::new();
    for jobs in [1, 2, 4] {
        let _ = fs::remove_dir_all(&out);
        match run_pipeline(&cfg, jobs) {
            Ok(_) => snaps.push((jobs, snapshot(&out))),
            Err(e) => {
                return Outcome { id: 9, title: "pipeline determinism", pass: false, summary: format!("run with --jobs {jobs} failed: {e}") };
            }
        }
    }
    let reference = &snaps[0].1;
    let mut diffs = Vec::new();
    for (jobs, s) in &snaps[1..] {
        if s.len() != reference.len() {
            diffs.push(format!("jobs {jobs}: {} files vs {}", s.len(), reference.len()));
        }
        for ((pa, ba), (pb, bb)) in reference.iter().zip(s) {
            if pa != pb || ba != bb {
                diffs.push(format!("jobs {jobs}: {pa} differs"));
            }
        }
    }
    for d in &diffs {
        detail(d);
    }
    Outcome {
        id: 9,
        title: "pipeline determinism across --jobs",
        pass: diffs.is_empty() && reference.len() >= 8,
        summary: format!("{} CSV/JSON files compared for --jobs 1, 2, 4: {} differences", reference.len(), diffs.len()),
    }
}

fn main() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let outcomes = pool.install(|| {
        let mut all = Vec::new();
        let mut report = |o: Outcome| {
            println!("{} criterion {}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.title, o.summary);
            all.push(o.pass);
        };
        report(criterion_1());
        report(criterion_5());
        report(criterion_6());
        report(criterion_7());
        report(criterion_2());
        let cohort = run_cohort();
        report(criterion_3(&cohort));
        report(criterion_4(&cohort));
        report(criterion_8());
        report(criterion_9());
        all
    });
    let failed = outcomes.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
