use std::sync::OnceLock;

use xmodal::model::SourceModel;
use xmodal::synth::{generate, GeneratedCorpus, SynthSpec};
use xmodal::transfer::{
    train_source, ExperimentConfig, IterationRecord, LabeledBatchSource, Precompute, TransferConfig,
    TransferObserver,
};

pub struct Setup {
    pub corpus: GeneratedCorpus,
    pub sources: Vec<SourceModel>,
    pub config: TransferConfig,
}

/// Two sources trained briefly on a 20-samples-per-class corpus, shared by
/// every test in a binary.
pub fn setup() -> &'static Setup {
    static CELL: OnceLock<Setup> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = SynthSpec {
            samples_per_class: 20,
            ..SynthSpec::default()
        };
        let corpus = generate(&spec).unwrap();
        let config = TransferConfig {
            source_epochs: 3,
            transfer_epochs: 2,
            ..TransferConfig::default()
        };
        let model = ExperimentConfig::default().model;
        let sources = corpus
            .source_domains
            .iter()
            .map(|d| {
                let x = d.inputs();
                let data = LabeledBatchSource {
                    inputs: &x,
                    labels: &d.labels,
                };
                train_source(data, model.clone(), spec.num_tr_classes, &config).unwrap()
            })
            .collect();
        Setup {
            corpus,
            sources,
            config,
        }
    })
}

/// Records what a transfer run reports through its observer hooks.
#[derive(Default)]
pub struct Probe {
    pub precomputes: Vec<Precompute>,
    pub zetas: Vec<Vec<f64>>,
    /// Classifier weights identical at every iteration.
    pub classifiers_unchanged: bool,
    first_classifiers: Option<Vec<Vec<f64>>>,
    /// Iterations completed when each precompute happened.
    pub iterations_at_precompute: Vec<usize>,
    pub iterations: usize,
}

pub fn classifier_bits(models: &[SourceModel]) -> Vec<Vec<f64>> {
    models
        .iter()
        .map(|m| {
            let mut v = m.classifier.weight.value.data().to_vec();
            v.extend(m.classifier.bias.value.data());
            v
        })
        .collect()
}

impl TransferObserver for Probe {
    fn on_precompute(&mut self, what: Precompute) {
        self.precomputes.push(what);
        self.iterations_at_precompute.push(self.iterations);
    }

    fn on_iteration(&mut self, record: &IterationRecord, models: &[SourceModel]) -> xmodal::Result<()> {
        self.iterations += 1;
        self.zetas.push(record.zeta.clone());
        let bits = classifier_bits(models);
        match &self.first_classifiers {
            None => {
                self.first_classifiers = Some(bits);
                self.classifiers_unchanged = true;
            }
            Some(first) => self.classifiers_unchanged &= *first == bits,
        }
        Ok(())
    }
}
