//! Throwaway calibration probe. Not part of the deliverable.

use crossalign::synthdata::load_ground_truth;
use crossalign::training::{corpus_weights, evaluate_ids, fit, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let corpus_dir = &args[1];
    let corpus = crossalign::corpus::load_corpus(corpus_dir).unwrap();
    let truth = load_ground_truth(format!("{corpus_dir}/ground_truth.json")).unwrap();

    let mut config = TrainConfig::default();
    config.learning_rate = args[2].parse().unwrap();
    config.epochs = args[3].parse().unwrap();
    config.j0 = args[4].parse().unwrap();
    config.omega_c = args[5].parse().unwrap();
    if let Some(k) = args.get(6) {
        config.k = k.parse().unwrap();
    }
    config.seed = 7;

    let outcome = fit(&config, &corpus, None).unwrap();
    let state = outcome.last;

    // Selector/raw mapping: which raw column dominates each output dim.
    let weight = &state.head_image.weight;
    let mut origin = vec![0usize; config.d];
    for out_dim in 0..config.d {
        let mut best = (0usize, f64::MIN);
        for raw in 0..corpus.d {
            let v = weight.get(raw, out_dim).abs();
            if v > best.1 {
                best = (raw, v);
            }
        }
        origin[out_dim] = best.0;
    }

    let probs = state.probs.as_ref().unwrap();
    let table = corpus_weights(&state, &corpus).unwrap().unwrap();
    let n = corpus.pair_count();
    let mean_inst = |side: &Vec<Vec<f64>>, d: usize| -> f64 {
        side.iter().map(|row| row[d]).sum::<f64>() / n as f64
    };
    let sd_inst = |side: &Vec<Vec<f64>>, d: usize, mean: f64| -> f64 {
        (side.iter().map(|row| (row[d] - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    };

    println!("dim raw sem | pseudo_v pseudo_t | inst_v(sd) inst_t(sd)");
    let mut group = std::collections::BTreeMap::new();
    for d in 0..config.d {
        let sem = truth.semantic_mask_image[origin[d]];
        let pv = probs.image.pseudo_semantic[d];
        let pt = probs.text.pseudo_semantic[d];
        let iv = mean_inst(&table.0, d);
        let it = mean_inst(&table.1, d);
        let sv = sd_inst(&table.0, d, iv);
        let st = sd_inst(&table.1, d, it);
        println!(
            "{d:3} {raw:3} {s} | {pv:.3} {pt:.3} | {iv:.3}({sv:.3}) {it:.3}({st:.3})",
            raw = origin[d],
            s = if sem { "S" } else { "." }
        );
        let e = group.entry(sem).or_insert((0.0, 0.0, 0.0, 0.0, 0usize));
        e.0 += pv;
        e.1 += pt;
        e.2 += iv;
        e.3 += it;
        e.4 += 1;
    }
    for (sem, (pv, pt, iv, it, c)) in &group {
        let c = *c as f64;
        println!(
            "group {}: pseudo_v {:.3} pseudo_t {:.3} inst_v {:.3} inst_t {:.3}",
            if *sem { "sem  " } else { "style" },
            pv / c,
            pt / c,
            iv / c,
            it / c
        );
    }
    println!("epsilon_v {:?} epsilon_t {:?}", probs.image.epsilon, probs.text.epsilon);

    // Geometry: mean squared distance to the nearest prototype and mean
    // squared norm per column-instance group, image side.
    {
        use crossalign::probability::min_sq_distance;
        let mut agg = std::collections::BTreeMap::new();
        for set in &corpus.images {
            let projected =
                crossalign::training::project_instance(set, &state.head_image, false).unwrap();
            let tokens = &projected.tokens;
            let mut column = vec![0.0; tokens.rows()];
            for d in 0..tokens.cols() {
                for i in 0..tokens.rows() {
                    column[i] = tokens.get(i, d);
                }
                let delta = min_sq_distance(&column, &state.bank_image.prototypes).unwrap();
                let norm2: f64 = column.iter().map(|v| v * v).sum();
                let sem = truth.semantic_mask_image[origin[d]];
                let e = agg.entry(sem).or_insert((0.0, 0.0, 0usize));
                e.0 += delta;
                e.1 += norm2;
                e.2 += 1;
            }
        }
        for (sem, (delta, norm2, count)) in agg {
            println!(
                "geometry {}: mean d2 {:.3} mean norm2 {:.3}",
                if sem { "sem  " } else { "style" },
                delta / count as f64,
                norm2 / count as f64
            );
        }
        for k in 0..state.bank_image.prototypes.rows() {
            let row = state.bank_image.prototypes.row(k);
            let norm2: f64 = row.iter().map(|v| v * v).sum();
            print!("proto {k} norm {:.2}  ", norm2.sqrt());
        }
        println!();
    }

    let ids = &state.val_ids;
    let none = evaluate_ids(&corpus, ids, &state.head_image, &state.head_text, config.normalize_tokens, None).unwrap();
    let bv: Vec<Vec<f64>> = vec![probs.image.pseudo_semantic.clone(); n];
    let bt: Vec<Vec<f64>> = vec![probs.text.pseudo_semantic.clone(); n];
    let broadcast = evaluate_ids(
        &corpus, ids, &state.head_image, &state.head_text, config.normalize_tokens,
        Some((&bv, &bt)),
    )
    .unwrap();
    let inst = evaluate_ids(
        &corpus, ids, &state.head_image, &state.head_text, config.normalize_tokens,
        Some((&table.0, &table.1)),
    )
    .unwrap();
    // Hybrid: instance weights on the image (query-side fixed) only.
    let hv = evaluate_ids(
        &corpus, ids, &state.head_image, &state.head_text, config.normalize_tokens,
        Some((&table.0, &bt)),
    )
    .unwrap();
    println!("val rsum  none {:.1}  broadcast {:.1}  instance {:.1}  inst_v+pseudo_t {:.1}",
        none.rsum, broadcast.rsum, inst.rsum, hv.rsum);

    // Isolation: constant weights must match none; per-instance scalar
    // (row mean broadcast over dims) isolates candidate-level bias;
    // mean-matched rows isolate the per-dim profile.
    let cv: Vec<Vec<f64>> = vec![vec![0.7; config.d]; n];
    let constant = evaluate_ids(
        &corpus, ids, &state.head_image, &state.head_text, config.normalize_tokens,
        Some((&cv, &cv)),
    )
    .unwrap();
    let row_mean = |side: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        side.iter()
            .map(|row| {
                let m = row.iter().sum::<f64>() / row.len() as f64;
                vec![m; row.len()]
            })
            .collect()
    };
    let sv = row_mean(&table.0);
    let st = row_mean(&table.1);
    let scalar = evaluate_ids(
        &corpus, ids, &state.head_image, &state.head_text, config.normalize_tokens,
        Some((&sv, &st)),
    )
    .unwrap();
    let profile = |side: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        side.iter()
            .map(|row| {
                let m = row.iter().sum::<f64>() / row.len() as f64;
                row.iter().map(|w| w * 0.7 / m).collect()
            })
            .collect()
    };
    let fv = profile(&table.0);
    let ft = profile(&table.1);
    let prof = evaluate_ids(
        &corpus, ids, &state.head_image, &state.head_text, config.normalize_tokens,
        Some((&fv, &ft)),
    )
    .unwrap();
    println!(
        "isolate   const {:.1}  scalar {:.1}  profile {:.1}",
        constant.rsum, scalar.rsum, prof.rsum
    );
}
