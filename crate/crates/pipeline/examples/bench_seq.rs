use std::time::Instant;

use ecgc_core::features::BEAT_FEATURE_DIM;
use ecgc_core::synth::generate_corpus;
use ecgc_ml::seq::{seq_train, SeqConfig, TrainConfig};
use ecgc_pipeline::process_record;
use ecgc_core::inversion::{train_inversion, inversion_features};
use ecgc_core::detect::{analyze, detect_beats_with, delineate_with};
use ecgc_core::synth::generate_inversion_corpus;

fn main() {
    let t0 = Instant::now();
    let corpus = generate_corpus(25, 7); // 100 records
    println!("generate 100 records: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let inv_rows: Vec<_> = generate_inversion_corpus(30, 3)
        .iter()
        .map(|(r, inv)| {
            let sig = analyze(r);
            let anns = detect_beats_with(r, &sig).unwrap();
            let obs = delineate_with(r, &sig, &anns);
            (inversion_features(r, &obs).unwrap(), *inv)
        })
        .collect();
    let inv = train_inversion(&inv_rows).unwrap();
    println!("inversion model: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let processed: Vec<_> = corpus.iter().map(|(r, _)| process_record(r, &inv)).collect();
    let dt = t0.elapsed();
    println!("process 100 records: {dt:?} ({:?}/record)", dt / 100);

    let sequences: Vec<Vec<Vec<f64>>> = processed.iter().map(|p| p.beats.clone()).collect();
    let labels: Vec<usize> = corpus.iter().map(|(r, _)| r.label.unwrap().index()).collect();
    let mean_len: f64 = sequences.iter().map(|s| s.len() as f64).sum::<f64>() / sequences.len() as f64;
    println!("mean sequence length: {mean_len:.1}");

    let cfg = SeqConfig::standard(BEAT_FEATURE_DIM);
    let tc = TrainConfig { max_epochs: 2, ..Default::default() };
    let t0 = Instant::now();
    let (_m, log) = seq_train(&sequences, &labels, &cfg, &tc, 1).unwrap();
    let dt = t0.elapsed();
    println!("seq_train 2 epochs on 100 seqs: {dt:?} ({:?}/epoch)", dt / 2);
    for (i, e) in log.epochs.iter().enumerate() {
        println!("  epoch {i}: train {:.4} val {:.4}", e.train_loss, e.val_loss);
    }
}
