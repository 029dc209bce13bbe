//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use protoseg::data::{ClassId, EpisodeConfig, FeatureMap, FeatureVolume, Fusion, Grid, LabelMask, ProtoStrategy, VolumeImage};
use protoseg::eval::{dice, mean_of, DiceReport, PreparedSuite};
use protoseg::io;
use protoseg::pipeline::run_episode;
use protoseg::phantom::{default_extractor, default_suite, CounterRng};
use protoseg::proto::{confident_mask, query_prototype, support_prototype, MaskedSlice, Prototype, PrototypeBank, PrototypeSource, Provenance, QuerySlice};
use protoseg::scoring::{predict_mask, probability_map, pseudo_label, ProbabilityMap};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

struct Rand {
    rng: CounterRng,
    next: u64,
}

impl Rand {
    fn new(seed: u64) -> Self {
        Rand { rng: CounterRng::new(seed), next: 0 }
    }

    fn uniform(&mut self) -> f64 {
        self.next += 1;
        self.rng.uniform(0, self.next)
    }

    fn normal(&mut self) -> f64 {
        self.next += 1;
        self.rng.normal(1, self.next)
    }

    fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    fn feature_map(&mut self, h: usize, w: usize, z: usize) -> FeatureMap {
        let data = (0..h * w * z).map(|_| (3.0 * self.normal()) as f32).collect();
        FeatureMap::new(h, w, z, data).unwrap()
    }
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let scale = y.abs().max(f64::MIN_POSITIVE);
            x == y || (x - y).abs() / scale <= tol
        })
}

/// Oracle: mean over slices with any masked pixel of the per-slice masked mean.
fn oracle_pool(slices: &[(&FeatureMap, Vec<bool>)]) -> Option<Vec<f64>> {
    let z = slices[0].0.channels();
    let mut total = vec![0.0f64; z];
    let mut used = 0usize;
    for (fm, mask) in slices {
        let (h, w) = fm.shape();
        let mut sum = vec![0.0f64; z];
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] {
                    n += 1;
                    for (k, v) in fm.pixel(y, x).iter().enumerate() {
                        sum[k] += *v as f64;
                    }
                }
            }
        }
        if n > 0 {
            used += 1;
            for k in 0..z {
                total[k] += sum[k] / n as f64;
            }
        }
    }
    (used > 0).then(|| total.iter().map(|t| t / used as f64).collect())
}

fn support_pooling_oracle() -> Outcome {
    let start = Instant::now();
    let mut empty_checked = 0;
    for inst in 0..200u64 {
        let mut r = Rand::new(10_000 + inst);
        let (h, w, z, k) = (r.range(2, 12), r.range(2, 12), r.range(1, 8), r.range(1, 4));
        let maps: Vec<FeatureMap> = (0..k).map(|_| r.feature_map(h, w, z)).collect();
        let all_empty = r.uniform() < 0.05;
        let masks: Vec<Vec<bool>> = (0..k)
            .map(|_| {
                let p = if all_empty || r.uniform() < 0.3 { 0.0 } else { r.uniform() };
                (0..h * w).map(|_| r.uniform() < p).collect()
            })
            .collect();
        let grids: Vec<Grid<bool>> = masks.iter().map(|m| Grid::new(h, w, m.clone()).unwrap()).collect();
        let slices: Vec<MaskedSlice> =
            (0..k).map(|i| MaskedSlice { index: i, features: &maps[i], mask: &grids[i] }).collect();
        let pairs: Vec<(&FeatureMap, Vec<bool>)> = maps.iter().zip(masks.iter().cloned()).collect();
        match (support_prototype(ClassId(1), &slices), oracle_pool(&pairs)) {
            (Ok(p), Some(want)) => {
                if !rel_close(&p.vector, &want, 1e-6) {
                    return Err(format!("instance {inst}: {:?} vs oracle {:?}", p.vector, want));
                }
            }
            (Err(protoseg::Error::EmptyClass(_)), None) => empty_checked += 1,
            (got, want) => return Err(format!("instance {inst}: got {got:?}, oracle {want:?}")),
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(5) {
        return Err(format!("took {elapsed:?} (> 5 s)"));
    }
    Ok(format!("200 instances within 1e-6 ({empty_checked} all-empty rejected) in {elapsed:.2?}"))
}

fn random_probs(r: &mut Rand, classes: &[ClassId], h: usize, w: usize) -> ProbabilityMap {
    let c = classes.len();
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        let sharp = 1.0 + 30.0 * r.uniform();
        let raw: Vec<f64> = (0..c).map(|_| r.uniform().powf(sharp)).collect();
        let total: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / total));
    }
    ProbabilityMap::new(classes.to_vec(), h, w, data).unwrap()
}

fn query_pooling_oracle() -> Outcome {
    let start = Instant::now();
    let mut nonempty = 0;
    for inst in 0..200u64 {
        let mut r = Rand::new(20_000 + inst);
        let (h, w, z) = (r.range(2, 10), r.range(2, 10), r.range(1, 6));
        let n_classes = r.range(2, 4);
        let classes: Vec<ClassId> = (0..n_classes as u8).map(ClassId).collect();
        let n = r.range(1, 5);
        let maps: Vec<FeatureMap> = (0..n).map(|_| r.feature_map(h, w, z)).collect();
        let probs: Vec<ProbabilityMap> = (0..n).map(|_| random_probs(&mut r, &classes, h, w)).collect();
        let pseudo: Vec<_> = probs.iter().map(pseudo_label).collect();
        let window: Vec<QuerySlice> = (0..n)
            .map(|i| QuerySlice { index: 40 + i, features: &maps[i], probs: &probs[i], pseudo: &pseudo[i] })
            .collect();
        let class = classes[r.below(n_classes)];
        let ci = classes.iter().position(|&c| c == class).unwrap();
        let gamma = r.uniform();

        // oracle: enumerate confident pixels directly from the probability rows
        let pairs: Vec<(&FeatureMap, Vec<bool>)> = (0..n)
            .map(|i| {
                let mask = (0..h * w)
                    .map(|p| {
                        let row = probs[i].row(p);
                        let best = (0..n_classes).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                        best == ci && row[ci] >= gamma
                    })
                    .collect();
                (&maps[i], mask)
            })
            .collect();
        let got = query_prototype(class, gamma, &window).map_err(|e| e.to_string())?;
        match (got, oracle_pool(&pairs)) {
            (Some(p), Some(want)) => {
                nonempty += 1;
                if !rel_close(&p.vector, &want, 1e-6) {
                    return Err(format!("instance {inst}: {:?} vs oracle {:?}", p.vector, want));
                }
            }
            (None, None) => {}
            (got, want) => return Err(format!("instance {inst}: got {got:?}, oracle {want:?}")),
        }

        // antitone in gamma: raising the threshold only removes pixels
        let mut gammas: Vec<f64> = (0..4).map(|_| r.uniform()).collect();
        gammas.sort_by(f64::total_cmp);
        for i in 0..n {
            let sets: Vec<Grid<bool>> = gammas
                .iter()
                .map(|&g| confident_mask(class, g, &probs[i], &pseudo[i]).unwrap())
                .collect();
            for pair in sets.windows(2) {
                if pair[1].as_slice().iter().zip(pair[0].as_slice()).any(|(&hi, &lo)| hi && !lo) {
                    return Err(format!("instance {inst}: confident set grew with gamma"));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(10) {
        return Err(format!("took {elapsed:?} (> 10 s)"));
    }
    Ok(format!("200 windows within 1e-6 ({nonempty} non-empty), antitone holds, {elapsed:.2?}"))
}

fn proto(class: u8, vector: Vec<f64>) -> Prototype {
    Prototype {
        class: ClassId(class),
        vector,
        source: PrototypeSource::Support,
        provenance: Provenance { slices: vec![0], pixels: 1, fallback: false },
    }
}

fn random_bank(r: &mut Rand, classes: usize, z: usize) -> PrototypeBank {
    let mut bank = PrototypeBank::default();
    for c in 0..classes as u8 {
        let n = r.range(1, 2);
        let protos = (0..n).map(|_| proto(c, (0..z).map(|_| r.normal()).collect())).collect();
        bank.insert(ClassId(c), protos);
    }
    bank
}

fn softmax_validity() -> Outcome {
    let mut pixels = 0usize;
    let mut worst = 0.0f64;
    for m in 0..100u64 {
        let mut r = Rand::new(30_000 + m);
        let z = r.range(1, 8);
        let fm = r.feature_map(32, 32, z);
        let n_classes = r.range(2, 6);
        let bank = random_bank(&mut r, n_classes, z);
        let alpha = [1.0, 20.0, 50.0, 100.0][m as usize % 4];
        let fusion = if m % 2 == 0 { Fusion::Max } else { Fusion::Mean };
        let probs = probability_map(&fm, &bank, alpha, fusion).map_err(|e| e.to_string())?;
        for row in probs.rows() {
            if row.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
                return Err(format!("map {m}: invalid entry in {row:?}"));
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            pixels += 1;
        }
    }
    if worst > 1e-6 {
        return Err(format!("row sum off by {worst:e}"));
    }
    Ok(format!("{pixels} pixels, max |sum - 1| = {worst:.1e}, alpha up to 100"))
}

fn scale_invariance() -> Outcome {
    let lambdas = [1e-3f32, 1.0, 7.3, 1e3];
    for s in 0..50u64 {
        let mut r = Rand::new(40_000 + s);
        let (h, w, z) = (r.range(6, 24), r.range(6, 24), r.range(1, 6));
        let base = r.feature_map(h, w, z);
        let labels: Grid<ClassId> = Grid::from_fn(h, w, |_, _| ClassId(r.below(3) as u8));
        let mut reference: Option<Grid<ClassId>> = None;
        for &lambda in &lambdas {
            let fm = base.scaled(lambda).map_err(|e| e.to_string())?;
            let mut bank = PrototypeBank::default();
            for c in 0..3u8 {
                let mask = labels.binary_view(ClassId(c));
                if let Ok(p) = support_prototype(ClassId(c), &[MaskedSlice { index: 0, features: &fm, mask: &mask }]) {
                    bank.insert(ClassId(c), vec![p]);
                }
            }
            let (pseudo, probs) = predict_mask(&fm, &bank, 20.0, Fusion::Max).map_err(|e| e.to_string())?;
            match &reference {
                None => reference = Some(pseudo.labels().clone()),
                Some(want) if want != pseudo.labels() => {
                    let p = want.as_slice().iter().zip(pseudo.labels().as_slice()).position(|(a, b)| a != b).unwrap();
                    return Err(format!("slice {s}: labels differ at lambda {lambda}, row {:?}", probs.row(p)));
                }
                Some(_) => {}
            }
        }
    }
    Ok(format!("50 slices identical across lambda {lambdas:?}"))
}

fn noop_identity() -> Outcome {
    let suite = default_suite(20, 0, 3).map_err(|e| e.to_string())?;
    let extractor = default_extractor();
    let augmented = EpisodeConfig { gamma: 1.0, ..Default::default() };
    let plain = EpisodeConfig { gamma: 1.0, strategy: ProtoStrategy::SupportOnly, ..Default::default() };
    let mut max_conf = 0.0f64;
    for ep in &suite {
        let a = run_episode(&ep.episode, &extractor, &augmented).map_err(|e| e.to_string())?;
        let b = run_episode(&ep.episode, &extractor, &plain).map_err(|e| e.to_string())?;
        for p in &b.probabilities {
            for row in p.rows() {
                max_conf = max_conf.max(row.iter().copied().fold(0.0, f64::max));
            }
        }
        if a.masks != b.masks {
            return Err(format!("{}: masks differ", ep.id));
        }
        let same_probs = a.probabilities.iter().zip(&b.probabilities).all(|(x, y)| {
            x.rows().flatten().zip(y.rows().flatten()).all(|(u, v)| u.to_bits() == v.to_bits())
        });
        if !same_probs {
            return Err(format!("{}: probabilities differ", ep.id));
        }
    }
    if max_conf >= 1.0 {
        return Err(format!("precondition violated: a confidence reached {max_conf}"));
    }
    Ok(format!("20 episodes bitwise equal to SUPPORT_ONLY (max confidence 1 - {:.1e})", 1.0 - max_conf))
}

fn strategy_ordering() -> Outcome {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let (only, both) = pool.install(|| -> Result<_, String> {
        let suite = default_suite(20, 0, 3).map_err(|e| e.to_string())?;
        let prepared = PreparedSuite::new(&suite, &default_extractor()).map_err(|e| e.to_string())?;
        let run = |strategy| {
            let config = EpisodeConfig { strategy, ..Default::default() };
            prepared.evaluate(&config).map_err(|e| e.to_string())
        };
        Ok((run(ProtoStrategy::SupportOnly)?, run(ProtoStrategy::SupportAndQuery)?))
    })?;
    let elapsed = start.elapsed();
    let report = |s: &[protoseg::eval::EpisodeScores]| {
        DiceReport::from_episodes(&s.iter().map(|e| e.fin.clone()).collect::<Vec<_>>())
    };
    let (ro, rb) = (report(&only), report(&both));
    let improved = only.iter().zip(&both).filter(|(o, b)| mean_of(&b.fin) > mean_of(&o.fin)).count();
    let detail = format!(
        "SUPPORT_ONLY {:.4}, SUPPORT_AND_QUERY {:.4}, improved on {improved}/20 volumes, {elapsed:.1?} single-threaded",
        ro.mean, rb.mean
    );
    if rb.mean < ro.mean - 0.005 || improved * 10 < 20 * 7 || elapsed > Duration::from_secs(120) {
        return Err(detail);
    }
    Ok(detail)
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_protoseg")
}

fn ablate_csv_shape() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = dir.path().join("suite.json");
    std::fs::write(&spec, r#"{"episodes": 3, "seed": 0}"#).map_err(|e| e.to_string())?;
    let suite = dir.path().join("suite");
    let status = Command::new(bin())
        .args(["phantom-gen", "--spec"])
        .arg(&spec)
        .arg("--out-dir")
        .arg(&suite)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("phantom-gen failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    let header = "class_1,class_2,class_3,class_4,mean";
    let mut checked = Vec::new();
    for (axis, rows) in [("window", vec!["0", "3", "7", "10", "ALL"]), ("iterations", vec!["2", "5", "8", "10"])] {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("{axis}_{run}.csv"));
            let o = Command::new(bin())
                .args(["ablate", "--suite"])
                .arg(&suite)
                .args(["--axis", axis, "--out"])
                .arg(&out)
                .output()
                .map_err(|e| e.to_string())?;
            if !o.status.success() {
                return Err(format!("ablate {axis} failed: {}", String::from_utf8_lossy(&o.stderr)));
            }
            outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
        }
        if outputs[0] != outputs[1] {
            return Err(format!("{axis}: rerun not byte-identical"));
        }
        let text = String::from_utf8(outputs.remove(0)).map_err(|e| e.to_string())?;
        let mut lines = text.lines();
        let want_header = format!("{axis},{header}");
        if lines.next() != Some(want_header.as_str()) {
            return Err(format!("{axis}: header {:?}", text.lines().next()));
        }
        let got: Vec<&str> = lines.clone().map(|l| l.split(',').next().unwrap()).collect();
        if got != rows {
            return Err(format!("{axis}: rows {got:?}"));
        }
        if lines.any(|l| l.split(',').count() != 6) {
            return Err(format!("{axis}: ragged row"));
        }
        checked.push(format!("{axis} {rows:?}"));
    }
    Ok(format!("{}; reruns byte-identical", checked.join(", ")))
}

fn dice_units() -> Outcome {
    let a = [true, true, false, false];
    let cases = [
        ("identity", dice(&a, &a), 1.0),
        ("disjoint", dice(&[true, false], &[false, true]), 0.0),
        ("half overlap", dice(&[true, true, false, false], &[true, false, true, false]), 0.5),
        ("both empty", dice(&[false; 3], &[false; 3]), 1.0),
    ];
    for (name, got, want) in cases {
        let got = got.map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("{name}: {got} != {want}"));
        }
    }
    Ok("identity 1, disjoint 0, half 0.5, both-empty 1 (exact)".into())
}

fn special_f32(r: &mut Rand) -> f32 {
    match r.below(8) {
        0 => -0.0,
        1 => f32::MIN_POSITIVE / 3.0,
        2 => f32::MAX,
        3 => -f32::MAX,
        _ => (r.normal() * 1e3) as f32,
    }
}

fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut counts = [0usize; 3];
    for i in 0..100u64 {
        let mut r = Rand::new(50_000 + i);
        let dims = [r.range(1, 4), r.range(1, 9), r.range(1, 9)];
        let n = dims.iter().product::<usize>();
        let path = dir.path().join(format!("obj_{i}"));
        match i % 3 {
            0 => {
                let v = VolumeImage::from_flat(dims, (0..n).map(|_| special_f32(&mut r)).collect()).unwrap();
                io::write_volume(&path, &v).map_err(|e| e.to_string())?;
                let back = io::read_volume(&path).map_err(|e| e.to_string())?;
                if back.dims() != v.dims() || bits(&back.flat()) != bits(&v.flat()) {
                    return Err(format!("volume {i} changed"));
                }
            }
            1 => {
                let m = LabelMask::from_flat(dims, (0..n).map(|_| r.below(256) as u8).collect()).unwrap();
                io::write_mask(&path, &m).map_err(|e| e.to_string())?;
                if io::read_mask(&path).map_err(|e| e.to_string())? != m {
                    return Err(format!("mask {i} changed"));
                }
            }
            _ => {
                let z = r.range(1, 5);
                let data = (0..n * z).map(|_| special_f32(&mut r)).collect();
                let f = FeatureVolume::from_flat([dims[0], dims[1], dims[2], z], data, (dims[1] * 2, dims[2] * 2)).unwrap();
                io::save_embeddings(&path, &f).map_err(|e| e.to_string())?;
                let back = io::load_embeddings(&path).map_err(|e| e.to_string())?;
                if back.dims() != f.dims() || back.source_shape() != f.source_shape() || bits(&back.flat()) != bits(&f.flat()) {
                    return Err(format!("features {i} changed"));
                }
            }
        }
        counts[(i % 3) as usize] += 1;
    }
    let corrupt = corrupted_length_exit(dir.path())?;
    Ok(format!(
        "{} VOLRAW, {} MASKRAW, {} FEATVOL bit-exact; {corrupt}",
        counts[0], counts[1], counts[2]
    ))
}

fn corrupted_length_exit(dir: &Path) -> Result<String, String> {
    let vol = VolumeImage::from_flat([2, 4, 4], (0..32).map(|v| v as f32).collect()).unwrap();
    let mask = LabelMask::from_flat([2, 4, 4], (0..32).map(|v| (v % 2) as u8).collect()).unwrap();
    let good = dir.join("good.volraw");
    let mask_path = dir.join("good.maskraw");
    io::write_volume(&good, &vol).map_err(|e| e.to_string())?;
    io::write_mask(&mask_path, &mask).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&good).map_err(|e| e.to_string())?;
    let mut codes = Vec::new();
    for (name, data) in [("short.volraw", bytes[..bytes.len() - 1].to_vec()), ("long.volraw", [bytes.clone(), vec![0]].concat())] {
        let bad = dir.join(name);
        std::fs::write(&bad, data).map_err(|e| e.to_string())?;
        let o = Command::new(bin())
            .args(["segment", "--support-vol"])
            .arg(&good)
            .arg("--support-mask")
            .arg(&mask_path)
            .arg("--query-vol")
            .arg(&bad)
            .arg("--out")
            .arg(dir.join("r.maskraw"))
            .args(["--shots", "1"])
            .output()
            .map_err(|e| e.to_string())?;
        let stderr = String::from_utf8_lossy(&o.stderr);
        if o.status.code() != Some(2) || !stderr.contains(name) {
            return Err(format!("{name}: exit {:?}, stderr {stderr:?}", o.status.code()));
        }
        codes.push(2);
    }
    Ok(format!("truncated and padded files exit {codes:?}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("support prototype oracle", support_pooling_oracle),
        ("query prototype oracle", query_pooling_oracle),
        ("softmax validity", softmax_validity),
        ("scale invariance", scale_invariance),
        ("no-op augmentation identity", noop_identity),
        ("strategy ordering", strategy_ordering),
        ("ablation CSV shape", ablate_csv_shape),
        ("dice units", dice_units),
        ("file format round trip", format_round_trip),
    ];
    let mut failed = 0;
    let mut results = BTreeMap::new();
    for (name, check) in criteria {
        let outcome = check();
        match &outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
        results.insert(name, outcome.is_ok());
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
