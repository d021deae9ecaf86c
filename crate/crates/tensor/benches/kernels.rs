use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drrnet_tensor::kernels::conv::{conv2d_backward_weight, conv2d_forward};
use drrnet_tensor::kernels::fft::fft2;
use drrnet_tensor::kernels::resize::resize_bilinear_forward;
use drrnet_tensor::parallel::set_parallel;
use drrnet_tensor::{Conv2dOpts, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::rand_uniform(&[4, 32, 48, 48], -1.0, 1.0, &mut rng);
    let w = Tensor::<f32>::rand_uniform(&[32, 32, 3, 3], -1.0, 1.0, &mut rng);
    let dw = Tensor::<f32>::rand_uniform(&[32, 1, 7, 7], -1.0, 1.0, &mut rng);
    let y = conv2d_forward(&x, &w, None, Conv2dOpts::padded(1));
    let mut group = c.benchmark_group("conv2d");
    for (name, par) in MODES {
        set_parallel(par);
        group.bench_function(BenchmarkId::new("3x3_forward", name), |b| {
            b.iter(|| conv2d_forward(&x, &w, None, Conv2dOpts::padded(1)))
        });
        group.bench_function(BenchmarkId::new("3x3_weight_grad", name), |b| {
            b.iter(|| conv2d_backward_weight(&y, &x, w.shape(), Conv2dOpts::padded(1)))
        });
        let opts = Conv2dOpts { padding: 3, groups: 32, ..Default::default() };
        group.bench_function(BenchmarkId::new("7x7_depthwise", name), |b| {
            b.iter(|| conv2d_forward(&x, &dw, None, opts))
        });
    }
    group.finish();
    set_parallel(true);
}

fn resample_and_fft(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::rand_uniform(&[4, 32, 48, 48], -1.0, 1.0, &mut rng);
    let z = Tensor::<f32>::rand_uniform(&[4, 32, 48, 48, 2], -1.0, 1.0, &mut rng);
    let mut group = c.benchmark_group("spatial");
    for (name, par) in MODES {
        set_parallel(par);
        group.bench_function(BenchmarkId::new("bilinear_2x", name), |b| b.iter(|| resize_bilinear_forward(&x, 96, 96)));
        group.bench_function(BenchmarkId::new("fft2", name), |b| b.iter(|| fft2(&z, false, 1.0)));
    }
    group.finish();
    set_parallel(true);
}

criterion_group!(benches, conv, resample_and_fft);
criterion_main!(benches);
