use promptseg::dataio::{generate_synthetic, Dataset, Subsequence, SynthConfig, WindowSpec};
use promptseg::model::ModelConfig;
use promptseg::rng::stream;
use promptseg::training::{fit, write_history, TrainConfig, Trainer};
use promptseg::model::Model;

fn small_dataset() -> Dataset {
    let cfg = SynthConfig { num_series: 2, length: 4000, segment_len_range: (30, 120), ..Default::default() };
    let mut ds = generate_synthetic(&cfg).unwrap();
    ds.add_coarse_level(2).unwrap();
    ds
}

fn small_setup() -> (Vec<Subsequence>, Vec<Subsequence>, WindowSpec, ModelConfig, TrainConfig) {
    let ds = small_dataset();
    let (train, val, _) = ds.chronological_split([0.7, 0.15, 0.15]).unwrap();
    let spec = WindowSpec::new(64, 16, 8).unwrap();
    let mc = ModelConfig {
        d_model: 16,
        enc_layers: 1,
        dec_blocks: 2,
        window_len: 64,
        context_len: 64,
        num_states: ds.label_space(),
        ..Default::default()
    };
    let tc = TrainConfig { n_prompts: 2, iterations: 4, batch_size: 4, lr: 1e-3, max_epochs: 6, ..Default::default() };
    (train.subsequences(&spec).unwrap(), val.subsequences(&spec).unwrap(), spec, mc, tc)
}

#[test]
fn seeded_fit_is_repeatable() {
    let (train, val, spec, mc, tc) = small_setup();
    let a = fit(&train, &val, &mc, &tc, &spec, |_| {}).unwrap();
    let b = fit(&train, &val, &mc, &tc, &spec, |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params(), b.model.params());
    let mut out = Vec::new();
    write_history(&a.history, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), a.history.len());
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "val_acc", "val_mf1", "val_ari"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn zero_patience_stops_one_epoch_after_the_best() {
    let (train, val, spec, mc, tc) = small_setup();
    let tc = TrainConfig { patience: 0, max_epochs: 30, ..tc };
    let out = fit(&train, &val, &mc, &tc, &spec, |_| {}).unwrap();
    let h = &out.history;
    assert!(h.len() < 30, "never stopped");
    assert_eq!(h.len(), out.best_epoch + 1);
    assert!(h[h.len() - 1].val_acc <= h[h.len() - 2].val_acc);
    assert!(h[..h.len() - 1].windows(2).all(|w| w[1].val_acc > w[0].val_acc));
}

#[test]
fn empty_split_is_a_config_error() {
    let (train, _, spec, mc, tc) = small_setup();
    assert!(fit(&train, &[], &mc, &tc, &spec, |_| {}).unwrap_err().is_config());
    assert!(fit(&[], &train, &mc, &tc, &spec, |_| {}).unwrap_err().is_config());
}

#[test]
fn single_subsequence_overfits_at_default_lr() {
    let (train, _, spec, mc, _) = small_setup();
    let tc = TrainConfig { n_prompts: 2, iterations: 4, ..Default::default() };
    let subseq = &train[0];
    let mut trainer = Trainer::new(Model::new(mc, 0).unwrap(), tc, spec).unwrap();
    let mut losses = Vec::new();
    for epoch in 0..200u64 {
        let (records, _) = trainer.train_subsequence(subseq, 0, stream(9, &[epoch]), epoch).unwrap();
        losses.push(records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64);
        if losses[losses.len() - 1] <= 0.5 * losses[0] {
            return;
        }
    }
    panic!("loss went from {} to {}", losses[0], losses[losses.len() - 1]);
}
