use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use npclass_core::events::{detect_events, DetectorConfig};
use npclass_core::nnet::{porenet_s, Model, Tensor};
use npclass_core::synthdata::{generate_trace, SynthConfig};
use npclass_core::wavelets::{cwt, dwt_denoise, MotherWavelet, ScaleGrid, Signal};

fn bench_cwt(c: &mut Criterion) {
    let wavelet = MotherWavelet::default();
    let grid = ScaleGrid::from_min_period(&wavelet, 2.0, 8, 6).unwrap();
    let mut g = c.benchmark_group("cwt");
    for n in [128usize, 1024] {
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin() + 0.1 * (i as f64 * 1.7).cos()).collect();
        let sig = Signal::new(x, 250e3).unwrap();
        g.throughput(Throughput::Elements(n as u64));
        g.bench_function(format!("hhat_48_scales_n{n}"), |b| b.iter(|| cwt(&sig, &wavelet, &grid).unwrap()));
    }
    g.finish();
}

fn bench_detect(c: &mut Criterion) {
    let cfg = SynthConfig {
        duration_s: 2.0,
        n_classes: 6,
        event_rate_hz: 50.0,
        ..Default::default()
    };
    let (trace, _) = generate_trace(&cfg).unwrap();
    let det = DetectorConfig::default();
    let mut g = c.benchmark_group("detect");
    g.sample_size(10);
    g.throughput(Throughput::Elements(trace.len() as u64));
    g.bench_function("detect_500k_samples", |b| b.iter(|| detect_events(&trace, &det).unwrap()));
    let sig = Signal::from_f32(&trace.samples, trace.sample_rate_hz).unwrap();
    g.bench_function("dwt_denoise_500k_samples", |b| b.iter(|| dwt_denoise(&sig, 0.5, 4).unwrap()));
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let model = Model::<f32>::new(porenet_s(42, 64, 64), 3).unwrap();
    let n = 16;
    let x = Tensor::new(
        vec![n, 1, 64, 64],
        (0..n * 4096).map(|i| ((i % 97) as f32 - 48.0) / 48.0).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 42).collect();
    let mut g = c.benchmark_group("porenet_s");
    g.sample_size(20);
    g.throughput(Throughput::Elements(n as u64));
    g.bench_function("forward_batch16_64x64", |b| b.iter(|| model.forward(&x).unwrap()));
    g.bench_function("forward_backward_batch16_64x64", |b| {
        b.iter_batched(
            || model.clone(),
            |mut m| {
                let logits = m.forward_train(&x).unwrap();
                let (_, grad) = npclass_core::nnet::cross_entropy(&logits, &labels).unwrap();
                m.backward(&grad).unwrap();
                m
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(kernels, bench_cwt, bench_detect, bench_conv);
criterion_main!(kernels);
