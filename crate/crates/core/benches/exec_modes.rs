//! Batch loss + gradient under each execution mode.
//!
//! Build with `--no-default-features` to measure the sequential fallback;
//! all three modes then run on one thread.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dualprompt::data::{synth_catalog, synth_dataset, SynthConfig};
use dualprompt::encoders::{EncoderConfig, ToyEncoders};
use dualprompt::exec::ExecMode;
use dualprompt::loss_opt::{loss_and_gradients, LossConfig, ObjectiveInputs};
use dualprompt::model::ProjectedImages;
use dualprompt::prompts::{init_prompts, PromptConfig};
use dualprompt::scoring::ClassifierConfig;

fn bench(c: &mut Criterion) {
    let catalog = synth_catalog(20, 32, 1).unwrap();
    let data = synth_dataset(
        &catalog,
        &SynthConfig {
            n_images: 256,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    let encoder = ToyEncoders::build(&EncoderConfig::aligned(32)).unwrap();
    let images = ProjectedImages::new(&encoder, &data.images, ExecMode::Deterministic).unwrap();
    let bank = init_prompts(&PromptConfig::default(), catalog.len(), 0).unwrap();
    let classifier = ClassifierConfig::default();
    let loss = LossConfig::default();

    let mut group = c.benchmark_group("loss_and_gradients");
    for batch_size in [32usize, 256] {
        let batch: Vec<usize> = (0..batch_size).collect();
        for exec in [ExecMode::Sequential, ExecMode::Deterministic, ExecMode::Parallel] {
            let inputs = ObjectiveInputs {
                catalog: &catalog,
                encoder: &encoder,
                images: &images,
                labels: &data.labels,
                batch: &batch,
                classifier: &classifier,
                loss: &loss,
                exec,
            };
            group.bench_with_input(
                BenchmarkId::new(format!("{exec:?}"), batch_size),
                &inputs,
                |b, inputs| b.iter(|| loss_and_gradients(&bank, inputs).unwrap()),
            );
        }
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
