//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any gating criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sumtopic::cluster::{hdbscan_fit, mst, HdbscanParams};
use sumtopic::corpus::{build_vocabulary, tokenize, Corpus};
use sumtopic::eval::{build_window_stats, cv_coherence, topic_diversity, InputType};
use sumtopic::matrix::Matrix;
use sumtopic::reduce::{smooth_knn, umap_fit_transform, UmapParams};
use sumtopic::runner::{aggregate, read_records_csv, run_experiment, summary_csv, GridConfig};
use sumtopic::synthetic::{axis_centers, gaussian_blobs, planted_corpus, PlantedConfig};
use sumtopic::topics::{class_tfidf, mmr_rerank, mmr_select, TopicConfig};
use sumtopic::{ClusterLabels, HashingEmbedder, TopicPipeline};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    check(
        elapsed <= Duration::from_secs(limit_secs),
        format!("took {:.2}s, limit {limit_secs}s", elapsed.as_secs_f64()),
    )
}

// ---------- brute-force metric oracles ----------

fn oracle_windows(c: &Corpus, w: usize) -> Vec<BTreeSet<String>> {
    let mut out = Vec::new();
    for d in &c.documents {
        let toks = tokenize(&d.text);
        if toks.len() <= w {
            out.push(toks.iter().cloned().collect());
        } else {
            for s in 0..=toks.len() - w {
                out.push(toks[s..s + w].iter().cloned().collect());
            }
        }
    }
    out
}

fn oracle_npmi(windows: &[BTreeSet<String>], a: &str, b: &str) -> f64 {
    let n = windows.len() as f64;
    let ca = windows.iter().filter(|s| s.contains(a)).count() as f64;
    let cb = windows.iter().filter(|s| s.contains(b)).count() as f64;
    let cab = windows.iter().filter(|s| s.contains(a) && s.contains(b)).count() as f64;
    if ca == 0.0 || cb == 0.0 {
        return -1.0;
    }
    let (pa, pb, pab) = (ca / n, cb / n, cab / n);
    if pab == 1.0 {
        return 1.0;
    }
    let eps = 1e-12;
    ((pab + eps) / (pa * pb)).ln() / -(pab + eps).ln()
}

fn oracle_cv(windows: &[BTreeSet<String>], topics: &[Vec<String>]) -> f64 {
    let mut total = 0.0;
    for t in topics {
        let m: Vec<Vec<f64>> = t
            .iter()
            .map(|a| t.iter().map(|b| oracle_npmi(windows, a, b)).collect())
            .collect();
        let sum: Vec<f64> = (0..t.len()).map(|j| m.iter().map(|r| r[j]).sum()).collect();
        let mut acc = 0.0;
        for r in &m {
            let dot: f64 = r.iter().zip(&sum).map(|(x, y)| x * y).sum();
            let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            let ns = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
            acc += if nr == 0.0 || ns == 0.0 { 0.0 } else { dot / (nr * ns) };
        }
        total += acc / t.len() as f64;
    }
    total / topics.len() as f64
}

fn oracle_diversity(topics: &[Vec<String>]) -> f64 {
    let mut seen = Vec::new();
    let mut slots = 0;
    for t in topics {
        for w in t {
            slots += 1;
            if !seen.contains(w) {
                seen.push(w.clone());
            }
        }
    }
    seen.len() as f64 / slots as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut compared = 0usize;
    for case in 0..25 {
        let n_terms = rng.random_range(4..=30);
        let terms: Vec<String> = (0..n_terms).map(|i| format!("term{i:02}q")).collect();
        let n_docs = rng.random_range(2..=50);
        let texts: Vec<String> = (0..n_docs)
            .map(|_| {
                let len = rng.random_range(1..40);
                (0..len)
                    .map(|_| terms[rng.random_range(0..n_terms)].as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let corpus = Corpus::from_texts("toy", &texts).map_err(|e| e.to_string())?;
        let w = [3usize, 10, 110][case % 3];
        let stats = build_window_stats(&corpus, w).map_err(|e| e.to_string())?;
        let windows = oracle_windows(&corpus, w);
        check(stats.n_windows == windows.len() as u64, format!("case {case}: window count"))?;
        for a in &terms {
            let occ = windows.iter().filter(|s| s.contains(a)).count() as u64;
            check(stats.occurrence(a) == occ, format!("case {case}: occurrence({a})"))?;
            for b in &terms {
                let co = windows.iter().filter(|s| s.contains(a) && s.contains(b)).count() as u64;
                check(stats.cooccurrence(a, b) == co, format!("case {case}: cooccurrence({a},{b})"))?;
                let d = (stats.npmi(a, b) - oracle_npmi(&windows, a, b)).abs();
                check(d <= 1e-9, format!("case {case}: npmi({a},{b}) off by {d}"))?;
                compared += 1;
            }
        }
        let n_topics = rng.random_range(1..=4);
        let topics: Vec<Vec<String>> = (0..n_topics)
            .map(|_| {
                let k = rng.random_range(2..=n_terms.min(10));
                let mut pick: Vec<String> = Vec::new();
                while pick.len() < k {
                    let t = terms[rng.random_range(0..n_terms)].clone();
                    if !pick.contains(&t) {
                        pick.push(t);
                    }
                }
                pick
            })
            .collect();
        let cv = cv_coherence(&topics, &stats).map_err(|e| e.to_string())?;
        let d = (cv - oracle_cv(&windows, &topics)).abs();
        check(d <= 1e-9, format!("case {case}: C_V off by {d}"))?;
        let div = topic_diversity(&topics).map_err(|e| e.to_string())?;
        check((div - oracle_diversity(&topics)).abs() <= 1e-9, format!("case {case}: diversity"))?;
    }
    within(start.elapsed(), 10)?;
    Ok(format!(
        "25 corpora, {compared} NPMI entries, C_V and diversity match brute force ({:.2}s)",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let corpus = Corpus::from_texts("abc", &["apple apple", "banana", "banana cherry"]).map_err(|e| e.to_string())?;
    let labels = ClusterLabels { labels: vec![0, 0, 1], n_clusters: 2 };
    let vocab = build_vocabulary(&corpus).map_err(|e| e.to_string())?;
    let m = class_tfidf(&corpus, &labels, &vocab).map_err(|e| e.to_string())?;
    let w = m.weight(0, vocab.index_of("apple").unwrap());
    check((w - 1.62186).abs() <= 1e-5, format!("W(apple, A) = {w}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pool = ["ant", "bee", "cat", "dog", "eel", "fox", "gnu", "hen", "ibis", "jay"];
    for case in 0..100 {
        let n = rng.random_range(2..20);
        let texts: Vec<String> = (0..n)
            .map(|_| {
                (0..rng.random_range(1..10))
                    .map(|_| pool[rng.random_range(0..pool.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let corpus = Corpus::from_texts("r", &texts).map_err(|e| e.to_string())?;
        let vocab = build_vocabulary(&corpus).map_err(|e| e.to_string())?;
        let k = rng.random_range(1..=3usize.min(n));
        let mut labels: Vec<i32> = (0..n).map(|_| rng.random_range(-1..k as i32)).collect();
        for (c, slot) in labels.iter_mut().take(k).enumerate() {
            *slot = c as i32;
        }
        // raw term frequency per class, counted directly
        let mut tf: BTreeMap<(i32, String), u64> = BTreeMap::new();
        for (text, &l) in texts.iter().zip(&labels) {
            if l >= 0 {
                for t in tokenize(text) {
                    *tf.entry((l, t)).or_default() += 1;
                }
            }
        }
        let m = class_tfidf(&corpus, &ClusterLabels { labels, n_clusters: k }, &vocab).map_err(|e| e.to_string())?;
        for c in 0..k {
            for (t, term) in vocab.terms().iter().enumerate() {
                let present = tf.get(&(c as i32, term.clone())).copied().unwrap_or(0) > 0;
                check(
                    (m.weight(c, t) > 0.0) == present,
                    format!("fixture {case}: W>0 iff tf>0 broken for {term} in class {c}"),
                )?;
            }
        }
    }
    Ok(format!("W(apple, A) = {w:.6}; positivity equivalence on 100 random fixtures"))
}

fn spanning_tree_minimum(n: usize, w: &[Vec<f64>]) -> f64 {
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << edges.len()) {
        if mask.count_ones() as usize != n - 1 {
            continue;
        }
        let mut comp: Vec<usize> = (0..n).collect();
        let find = |comp: &mut Vec<usize>, mut x: usize| {
            while comp[x] != x {
                x = comp[x];
            }
            x
        };
        let mut total = 0.0;
        let mut ok = true;
        for (i, &(a, b)) in edges.iter().enumerate() {
            if mask & (1 << i) != 0 {
                let (ra, rb) = (find(&mut comp, a), find(&mut comp, b));
                if ra == rb {
                    ok = false;
                    break;
                }
                comp[ra] = rb;
                total += w[a][b];
            }
        }
        if ok {
            best = best.min(total);
        }
    }
    best
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        let n = rng.random_range(2..=6);
        let mut w = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in a + 1..n {
                // coarse values so ties occur
                let v = f64::from(rng.random_range(1..6u32));
                w[a][b] = v;
                w[b][a] = v;
            }
        }
        let tree = mst(n, |a, b| w[a][b]);
        check(tree.len() == n - 1, format!("instance {case}: {} edges", tree.len()))?;
        let got: f64 = tree.iter().map(|e| e.weight).sum();
        let want = spanning_tree_minimum(n, &w);
        check((got - want).abs() < 1e-12, format!("instance {case}: weight {got} vs {want}"))?;
    }
    within(start.elapsed(), 5)?;
    Ok(format!("50 instances match exhaustive enumeration ({:.3}s)", start.elapsed().as_secs_f64()))
}

fn majority_agreement(truth: &[usize], labels: &[i32], n_true: usize) -> f64 {
    let mut agree = 0;
    for t in 0..n_true {
        let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
        for (&tl, &l) in truth.iter().zip(labels) {
            if tl == t {
                *counts.entry(l).or_default() += 1;
            }
        }
        agree += counts.iter().filter(|(l, _)| **l >= 0).map(|(_, c)| *c).max().unwrap_or(0);
    }
    agree as f64 / truth.len() as f64
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let (points, truth) = gaussian_blobs(&axis_centers(3, 2, 10.0), 100, 0.5, 11);
    let fit = hdbscan_fit(&points, &HdbscanParams::new(15)).map_err(|e| e.to_string())?;
    let labels = &fit.labels;
    check(labels.n_clusters == 3, format!("{} clusters", labels.n_clusters))?;
    let agree = majority_agreement(&truth, &labels.labels, 3);
    let noise = labels.noise_count() as f64 / truth.len() as f64;
    check(agree >= 0.95, format!("agreement {agree}"))?;
    check(noise <= 0.10, format!("noise {noise}"))?;
    within(start.elapsed(), 10)?;
    Ok(format!("3 clusters, agreement {agree:.3}, noise {noise:.3}"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tested = 0;
    let mut worst: f64 = 0.0;
    while tested < 1000 {
        let k = rng.random_range(2..30);
        let mut d: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5.0)).collect();
        d.sort_by(f64::total_cmp);
        let cal = smooth_knn(&d, k);
        if cal.clamped {
            continue;
        }
        let sum: f64 = d.iter().map(|&x| (-(x - cal.rho).max(0.0) / cal.sigma).exp()).sum();
        let r = (sum - (k as f64).log2()).abs();
        worst = worst.max(r);
        tested += 1;
    }
    check(worst < 1e-4, format!("worst residual {worst}"))?;
    let sigma = smooth_knn(&[1.0, 2.0, 3.0], 3).sigma;
    check((sigma - 1.1334).abs() <= 1e-3, format!("sigma {sigma}"))?;

    // 256-D hashing-style blobs, reduced to 5-D
    let (points, truth) = gaussian_blobs(&axis_centers(3, 256, 10.0), 100, 1.0, 9);
    let reduced = umap_fit_transform(&points, &UmapParams::default()).map_err(|e| e.to_string())?;
    let purity = centroid_purity(&reduced, &truth, 3);
    check(purity >= 0.9, format!("purity {purity}"))?;
    Ok(format!("worst residual {worst:.2e}, sigma {sigma:.4}, purity {purity:.3}"))
}

fn centroid_purity(points: &Matrix, truth: &[usize], k: usize) -> f64 {
    let dim = points.cols();
    let mut cent = vec![vec![0.0; dim]; k];
    let mut cnt = vec![0usize; k];
    for (row, &t) in points.iter_rows().zip(truth) {
        for (c, x) in cent[t].iter_mut().zip(row) {
            *c += x;
        }
        cnt[t] += 1;
    }
    for (c, n) in cent.iter_mut().zip(&cnt) {
        c.iter_mut().for_each(|x| *x /= *n as f64);
    }
    let hits = points
        .iter_rows()
        .zip(truth)
        .filter(|(row, &t)| {
            let dist = |c: &Vec<f64>| c.iter().zip(*row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (0..k).min_by(|&a, &b| dist(&cent[a]).total_cmp(&dist(&cent[b]))) == Some(t)
        })
        .count();
    hits as f64 / truth.len() as f64
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..100 {
        let n = rng.random_range(1..30);
        let dim = rng.random_range(2..12);
        let vecs: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let topic: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let cands: Vec<(String, f64)> = (0..n).map(|i| (format!("c{i}"), 1.0)).collect();
        let k = rng.random_range(1..12);
        let got = mmr_rerank(&cands, &vecs, &topic, 0.0, k);
        let cos = |v: &[f32]| {
            let dot: f64 = v.iter().zip(&topic).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            let nv = v.iter().map(|a| f64::from(*a).powi(2)).sum::<f64>().sqrt();
            let nt = topic.iter().map(|a| f64::from(*a).powi(2)).sum::<f64>().sqrt();
            dot / (nv * nt)
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| cos(&vecs[b]).total_cmp(&cos(&vecs[a])).then(a.cmp(&b)));
        let want: Vec<String> = order.into_iter().take(k).map(|i| format!("c{i}")).collect();
        check(got == want, format!("instance {case}: {got:?} vs {want:?}"))?;
    }
    let rel = [0.9, 0.85, 0.2];
    let sim = |i: usize, j: usize| if i.min(j) == 0 && i.max(j) == 1 { 0.99 } else { 0.0 };
    let picked: Vec<usize> = mmr_select(&rel, sim, 0.7, 2).into_iter().map(|i| i + 1).collect();
    check(picked == [1, 3], format!("fixture picked {picked:?}"))?;
    Ok("diversity 0 equals relevance top-k on 100 instances; fixture picks (1, 3)".into())
}

fn write_jsonl(corpus: &Corpus, path: &Path) -> Result<(), String> {
    corpus.write_jsonl(path).map_err(|e| e.to_string())
}

fn offline_config(data: &str, out: &str, sizes: &str) -> String {
    format!(
        "workers = 4\n[dataset]\nname = \"synthetic\"\npath = \"{data}\"\nlabel_field = \"label\"\n\
         [grid]\n{sizes}\n[output]\ndir = \"{out}\"\n[providers]\noffline = true\n"
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let planted = planted_corpus(&PlantedConfig {
        n_docs: 2000,
        n_pools: 5,
        seed: 21,
        ..PlantedConfig::default()
    });
    write_jsonl(&planted.corpus, &dir.path().join("corpus.jsonl"))?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let cfg = GridConfig::parse(&offline_config("corpus.jsonl", run, "min_topic_sizes = [10, 15, 20]"))
            .map_err(|e| e.to_string())?;
        run_experiment(&cfg, dir.path(), true).map_err(|e| e.to_string())?;
        outputs.push(dir.path().join(run));
    }
    let mut files = vec!["records.csv".to_string(), "summary.csv".into(), "diversity.svg".into(), "coherence.svg".into()];
    let mut models: Vec<String> = fs::read_dir(outputs[0].join("models"))
        .map_err(|e| e.to_string())?
        .map(|e| format!("models/{}", e.unwrap().file_name().to_string_lossy()))
        .collect();
    models.sort();
    check(!models.is_empty(), "no model JSON written")?;
    let n_models = models.len();
    files.extend(models);
    for f in &files {
        let a = fs::read(outputs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(outputs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        check(a == b, format!("{f} differs between runs"))?;
    }
    within(start.elapsed(), 300)?;
    Ok(format!(
        "2000 docs, two offline grid runs byte-identical across {} files incl. {n_models} models ({:.1}s)",
        files.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let planted = planted_corpus(&PlantedConfig { n_docs: 240, seed: 8, ..PlantedConfig::default() });
    write_jsonl(&planted.corpus, &dir.path().join("corpus.jsonl"))?;
    // grid section left at defaults; min topic sizes fall back to the suggested values
    let cfg = GridConfig::parse(&offline_config("corpus.jsonl", "out", "")).map_err(|e| e.to_string())?;
    let result = run_experiment(&cfg, dir.path(), true).map_err(|e| e.to_string())?;
    check(result.records.len() == 81, format!("{} records", result.records.len()))?;
    check(result.aggregate.cells.len() == 27, format!("{} cells", result.aggregate.cells.len()))?;
    check(result.aggregate.input_types.len() == 3, "input-type means")?;
    let tuples: BTreeSet<(InputType, u64, usize, u64)> = result
        .records
        .iter()
        .map(|r| (r.input_type, r.diversity_param.to_bits(), r.min_topic_size, r.seed))
        .collect();
    check(tuples.len() == 81, "grid tuples not distinct")?;
    let out = dir.path().join("out");
    let back = read_records_csv(&out.join("records.csv")).map_err(|e| e.to_string())?;
    let agg = aggregate(&back).map_err(|e| e.to_string())?;
    let on_disk = fs::read(out.join("summary.csv")).map_err(|e| e.to_string())?;
    check(summary_csv(&agg) == on_disk, "summary.csv not re-derivable from records.csv")?;
    Ok(format!(
        "81 records, 27 cell means, 3 input-type means; summary.csv re-derived exactly ({} degenerate)",
        result.aggregate.excluded_degenerate
    ))
}

fn criterion_9() -> Outcome {
    let planted = planted_corpus(&PlantedConfig { n_docs: 300, seed: 99, ..PlantedConfig::default() });
    let provider = HashingEmbedder::new(256, 42);
    let emb = sumtopic::embed_corpus(&planted.corpus, &provider, &Default::default()).map_err(|e| e.to_string())?;
    let pipe = TopicPipeline::new(&planted.corpus, &emb, &provider).map_err(|e| e.to_string())?;
    let model = pipe.fit(&TopicConfig::new(15, 0.1, 42)).map_err(|e| e.to_string())?;
    check(model.n_topics >= 1, "degenerate model")?;
    let lists = model.keyword_lists();
    let div = topic_diversity(&lists).map_err(|e| e.to_string())?;
    check(div >= 0.9, format!("diversity {div} over {} topics", model.n_topics))?;
    for (t, words) in lists.iter().enumerate() {
        let mut per_pool = vec![0usize; planted.pools.len()];
        for w in words {
            if let Some(p) = planted.pool_of(w) {
                per_pool[p] += 1;
            }
        }
        let best = per_pool.iter().max().copied().unwrap_or(0);
        check(words.len() == 10 && best >= 8, format!("topic {t}: {best}/{} from one pool", words.len()))?;
    }
    Ok(format!("{} topics, diversity {div:.3}, every top-10 >= 8/10 from one pool", model.n_topics))
}

fn main() {
    // libtest-style filter arguments are accepted and ignored
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "metric oracle equivalence", criterion_1),
        (2, "c-TF-IDF hand oracle", criterion_2),
        (3, "MST exactness", criterion_3),
        (4, "clustering recovery", criterion_4),
        (5, "UMAP calibration", criterion_5),
        (6, "MMR contracts", criterion_6),
        (7, "end-to-end determinism", criterion_7),
        (8, "grid shape", criterion_8),
        (9, "planted-topic sanity", criterion_9),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        match f() {
            Ok(detail) => println!("criterion {n} [{name}]: PASS - {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} [{name}]: FAIL - {why}");
            }
        }
    }
    println!("criterion 10 [trend replication with live providers]: MANUAL - non-gating, see README");
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
