//! Shared fixtures for the benches: a small synthetic cohort, its
//! vocabulary and a desk-sized model.

use labseq::ehr::{generate_synthetic, IcuStay, SyntheticConfig};
use labseq::model::{ModelConfig, ModelParams};
use labseq::textualize::{assemble_sequence, crop_sequence, AssemblyOptions};
use labseq::train::{LossMode, TrainExample};
use labseq::vocab::{build_vocab, Vocabulary};

pub struct Fixture {
    pub stays: Vec<IcuStay>,
    pub vocab: Vocabulary,
    pub examples: Vec<TrainExample>,
    pub params: ModelParams<f32>,
}

impl Fixture {
    /// `n_patients` synthetic patients, one stay each, desk model.
    pub fn new(n_patients: usize) -> Fixture {
        let cfg = SyntheticConfig {
            n_patients,
            stays_per_patient: (1, 1),
            ..SyntheticConfig::default()
        };
        let stays = generate_synthetic(&cfg).expect("synthetic cohort");
        let opts = AssemblyOptions::default();
        let records: Vec<_> = stays.iter().map(|s| assemble_sequence(s, None, &opts).expect("assemble")).collect();
        let vocab = build_vocab(&records);
        let model = ModelConfig::desk(vocab.len());
        let examples = records
            .iter()
            .flat_map(|r| crop_sequence(r, model.max_seq_len).expect("crop"))
            .map(|r| TrainExample::from_record(&r, &vocab, LossMode::LabOnly))
            .collect();
        let params = ModelParams::init(model, 7).expect("init");
        Fixture { stays, vocab, examples, params }
    }
}
