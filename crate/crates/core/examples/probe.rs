//! Scratch diagnostics: inspect the distance heatmap's within/cross-family
//! separation on the default benchmark.

use metaseg::data::prepare_datasets;
use metaseg::data::synth::{default_families, generate_benchmark};
use metaseg::harness::distance_heatmap;
use metaseg::seed::stream_seed;

fn main() {
    for root in [0u64, 1, 2, 7, 42] {
        check(root);
    }
}

fn check(root: u64) {
    let raw = generate_benchmark(&default_families(), stream_seed(root, "data")).unwrap();
    let prepared = prepare_datasets(&raw, 32, 32).unwrap();
    let m = distance_heatmap(&prepared, 100, stream_seed(root, "heatmap")).unwrap();

    let family_of: Vec<String> = m
        .ids
        .iter()
        .map(|id| prepared.iter().find(|d| &d.id == id).unwrap().family.clone())
        .collect();

    let mut within = Vec::new();
    let mut cross = Vec::new();
    for i in 0..m.n() {
        for j in (i + 1)..m.n() {
            let entry = (m.get(i, j), format!("{} vs {}", m.ids[i], m.ids[j]));
            if family_of[i] == family_of[j] {
                within.push(entry);
            } else {
                cross.push(entry);
            }
        }
    }
    cross.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut wins = 0;
    for (w, wl) in &within {
        println!("root {root}: within {wl} = {w:.2}, nearest cross {} = {:.2}", cross[0].1, cross[0].0);
        for (c, _) in &cross {
            wins += (w < c) as usize;
        }
    }
    println!("root {root}: wins {wins}/{}", within.len() * cross.len());
}
