// calibration probe for the wavelet-loss HF trend experiment
use gdsr_core::degrade::{synth_image, synthesize_lr, DegradationConfig, DegradeMode, SynthKind};
use gdsr_core::model::{GdsrModel, ModelConfig};
use gdsr_core::scalar::DType;
use gdsr_core::tensor::no_grad;
use gdsr_core::trainer::{train_loop, Dataset, TrainConfig};
use gdsr_core::wavelet::{dual_group, rgb_to_y, swt2, LossMode, WaveletFilter};
use gdsr_core::{Result, Rng, Scalar};
use std::time::Instant;

fn hf_error(model: &GdsrModel<f32>, hr: &gdsr_core::Tensor<f32>, dcfg: &DegradationConfig) -> Result<f64> {
    let lr = synthesize_lr(hr, dcfg, 999)?;
    let sr = no_grad(|| model.forward_image(&lr))?;
    let f = WaveletFilter::haar();
    let g_sr = dual_group(&swt2(&rgb_to_y(&sr.detach())?, &f, 2)?)?;
    let g_hr = dual_group(&swt2(&rgb_to_y(&hr.detach())?, &f, 2)?)?;
    Ok(g_sr.h.l1_loss(&g_hr.h)?.item()?.to_f64())
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(400);
    let n_seeds: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(5);

    let cfg = ModelConfig {
        scale: 2,
        channels: 16,
        n_groups: 1,
        blocks_per_rgeg: 2,
        rcbs_per_rdeg: 2,
        psam_coeff: 1.0 / 3.0,
        dtype: DType::F32,
    };
    let kinds = [SynthKind::Blobs, SynthKind::Ramp, SynthKind::Lines, SynthKind::Blobs];
    let mut irng = Rng::new(42);
    let images: Vec<(String, _)> = kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| (format!("img{i}"), synth_image::<f32>(k, 48, &mut irng).unwrap()))
        .collect();
    let holdout = synth_image::<f32>(SynthKind::Blobs, 48, &mut Rng::new(4242))?;
    let data = Dataset { images };
    let dcfg = DegradationConfig::new(DegradeMode::Bicubic, 2, 3);
    let epochs = steps; // batch 4 covers the whole set per step
    let mut wins = 0;
    let t0 = Instant::now();
    for seed in 0..n_seeds {
        let mut errs = [0.0f64; 2];
        for (mi, mode) in [LossMode::Rec, LossMode::RecPlusWav].iter().enumerate() {
            let model = GdsrModel::<f32>::new(&cfg, &mut Rng::new(seed + 100))?;
            let tcfg = TrainConfig {
                lr0: 1e-3,
                batch: 4,
                epochs,
                halve_at: epochs * 3 / 4,
                patch: 16,
                loss_mode: *mode,
                seed,
                ..TrainConfig::default()
            };
            train_loop(&model, &data, None, &dcfg, &tcfg)?;
            errs[mi] = hf_error(&model, &holdout, &dcfg)?;
        }
        let win = errs[1] <= errs[0];
        wins += win as u32;
        println!(
            "seed {seed}: rec hf {:.6e}  rec+wav hf {:.6e}  {}",
            errs[0],
            errs[1],
            if win { "wav wins" } else { "rec wins" }
        );
    }
    println!("{wins}/{n_seeds} seeds favor wavelet loss, {:.0}s total", t0.elapsed().as_secs_f64());
    Ok(())
}
