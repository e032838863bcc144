use pta::config::ModelConfig;
use pta::corpus::{generate_corpus, CorpusConfig};
use pta::model::PtaModel;
use pta::train::{evaluate_split, fit, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let dropout: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(32);

    let t0 = Instant::now();
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    println!("corpus: {} train / {} val_seen / {} val_unseen episodes in {:?}",
        corpus.train.len(), corpus.val_seen.len(), corpus.val_unseen.len(), t0.elapsed());

    let mut model = PtaModel::new(ModelConfig { dropout, ..ModelConfig::desk() }, 42).unwrap();
    println!("params: {}", model.store.total_elements());

    let cap: Option<usize> = args.get(5).and_then(|s| s.parse().ok());
    let warmup: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0);
    let patience: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(5);
    let cfg = TrainConfig { lr, max_epochs: epochs, seed: 42, batch_size: batch, max_steps: cap,
        warmup_epochs: warmup, lr_patience_epochs: patience, ..TrainConfig::default() };
    let t1 = Instant::now();
    let outcome = fit(&mut model, &corpus.worlds, &corpus.train, &corpus.val_seen, &corpus.val_unseen, &cfg).unwrap();
    for log in &outcome.logs {
        println!("epoch {} loss {:.4} lr {:e} | seen SR {:.3} SPL {:.3} nDTW {:.3} | unseen SR {:.3} SPL {:.3} nDTW {:.3}",
            log.epoch, log.train_loss, log.lr,
            log.val_seen.sr, log.val_seen.spl, log.val_seen.ndtw,
            log.val_unseen.sr, log.val_unseen.spl, log.val_unseen.ndtw);
    }
    println!("trained {} epochs in {:?} ({:?}/epoch)", outcome.epochs_run, t1.elapsed(), t1.elapsed() / outcome.epochs_run as u32);

    let t2 = Instant::now();
    let report = evaluate_split(&model, &corpus.worlds, &corpus.val_unseen).unwrap();
    println!("final unseen: SR {:.3} SPL {:.3} nDTW {:.3} (eval {:?})", report.mean.sr, report.mean.spl, report.mean.ndtw, t2.elapsed());
}
