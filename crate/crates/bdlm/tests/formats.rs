use bdlm::checkpoint::{Checkpoint, CheckpointError, CheckpointInfo};
use bdlm::config::{RunConfig, KEYS};
use bdlm::corpus::{parse_pairs, split_documents, PairMode};
use bdlm_core::model::{DenoiserParams, ModelConfig};
use proptest::prelude::*;

fn model(d: usize, layers: usize, seed: u64) -> DenoiserParams<f32> {
    let cfg = ModelConfig {
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        d_ff: 2 * d,
        max_len: 32,
        ..ModelConfig::default()
    };
    DenoiserParams::init(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoints_round_trip_bitwise(
        d in prop::sample::select(vec![4usize, 8, 12]),
        layers in 1usize..3,
        seed: u64,
        step: usize,
        elbo in prop::option::of(-10.0f64..10.0),
    ) {
        let info = CheckpointInfo { step, phase: "decay_1".into(), block_size: 4, validation_elbo: elbo, lr: Some(1e-4) };
        let c = Checkpoint::new(model(d, layers, seed), info);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.info, &c.info);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 0usize..2000, seed: u64) {
        let bytes = Checkpoint::new(model(4, 1, seed), CheckpointInfo::default()).to_bytes();
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        let trailing = matches!(Checkpoint::from_bytes(&longer), Err(CheckpointError::Trailing { extra: 1 }));
        prop_assert!(trailing);
    }

    #[test]
    fn documents_survive_blank_line_splitting(
        docs in prop::collection::vec(prop::collection::vec("[a-z0-9+=:]{1,12}", 1..4), 0..6),
    ) {
        let docs: Vec<String> = docs.iter().map(|lines| lines.join("\n")).collect();
        let text = docs.join("\n\n\n");
        prop_assert_eq!(split_documents(&text), docs);
    }

    #[test]
    fn pair_lines_round_trip(prompt in "[ -~]{1,20}", response in "[ -~]{0,20}") {
        let line = serde_json::json!({ "prompt": prompt, "response": response }).to_string();
        let f = parse_pairs(&line, PairMode::Sft);
        prop_assert!(f.diagnostics.is_empty());
        prop_assert_eq!(f.pairs.len(), 1);
        prop_assert_eq!(f.pairs[0].response.len(), response.len() + 1);
    }

    #[test]
    fn canonical_config_text_reparses_to_itself(
        lr in 1e-5f64..1e-1,
        batch in 1usize..64,
        seed: u64,
        cap: bool,
        out in "[a-z]{1,8}",
    ) {
        let mut c = RunConfig::default();
        c.train.lr = lr;
        c.train.batch_size = batch;
        c.train.seed = seed;
        c.sft_cap = cap;
        c.out_dir = out;
        let back = RunConfig::parse_str(&c.to_text()).unwrap();
        prop_assert_eq!(back, c);
    }
}

#[test]
fn every_documented_key_is_settable_and_readable() {
    let c = RunConfig::default();
    for k in KEYS {
        let v = c.get(k.name).unwrap();
        let mut d = RunConfig::default();
        d.set(k.name, &v, "test").unwrap();
        assert_eq!(d, c, "{}", k.name);
    }
}
