use diffmoe::harness::{synth_generate, SyntheticConfig};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_samples: 6,
        channels: 4,
        length: 1000,
        f_min: 3.0,
        f_max: 9.0,
        harmonics: 3,
        spike_prob: 0.5,
        amp_jitter: 0.2,
        noise_sigma: 0.05,
        seed,
    }
}

#[test]
fn dominant_bin_lies_in_the_frequency_range() {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(1000);
    for seed in [1, 2, 3] {
        let x = synth_generate(&config(seed)).unwrap();
        for (row, chunk) in x.data().chunks(1000).enumerate() {
            let mut buf: Vec<Complex<f64>> = chunk.iter().map(|&v| Complex::new(v, 0.0)).collect();
            fft.process(&mut buf);
            let peak = (1..500).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
            assert!((3..=9).contains(&peak), "seed {seed} row {row}: peak at bin {peak}");
        }
    }
}

#[test]
fn channels_are_standardized_with_noise_and_spikes() {
    let x = synth_generate(&config(4)).unwrap();
    for chunk in x.data().chunks(1000) {
        let mean = chunk.iter().sum::<f64>() / 1000.0;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1000.0;
        assert!(mean.abs() <= 1e-10 && (var.sqrt() - 1.0).abs() <= 1e-10);
    }
}
