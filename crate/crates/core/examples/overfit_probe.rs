// calibration probe for the micro overfit experiment
use gdsr_core::degrade::{synth_image, DegradationConfig, DegradeMode, SynthKind};
use gdsr_core::metrics::psnr_y;
use gdsr_core::model::{GdsrModel, ModelConfig};
use gdsr_core::scalar::DType;
use gdsr_core::tensor::no_grad;
use gdsr_core::trainer::{train_loop, Dataset, TrainConfig};
use gdsr_core::wavelet::LossMode;
use gdsr_core::{Result, Rng};
use std::time::Instant;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let lr0: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let patch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(16);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4);

    let cfg = ModelConfig {
        scale: 2,
        channels: 16,
        n_groups: 1,
        blocks_per_rgeg: 2,
        rcbs_per_rdeg: 2,
        psam_coeff: 1.0 / 3.0,
        dtype: DType::F32,
    };
    let mut rng = Rng::new(7);
    let model = GdsrModel::<f32>::new(&cfg, &mut rng)?;
    let kinds = [SynthKind::Blobs, SynthKind::Ramp, SynthKind::Lines, SynthKind::Blobs];
    let mut irng = Rng::new(42);
    let images: Vec<(String, _)> = kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| (format!("img{i}"), synth_image::<f32>(k, 48, &mut irng).unwrap()))
        .collect();
    let data = Dataset { images };
    let dcfg = DegradationConfig::new(DegradeMode::Bicubic, 2, 3);
    // steps per epoch = ceil(4 / batch)
    let steps_per_epoch = 4usize.div_ceil(batch);
    let epochs = steps.div_ceil(steps_per_epoch);
    let tcfg = TrainConfig {
        lr0,
        batch,
        epochs,
        halve_at: epochs * 3 / 4,
        patch,
        loss_mode: LossMode::Rec,
        seed: 11,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let hist = train_loop(&model, &data, None, &dcfg, &tcfg)?;
    let train_time = t0.elapsed().as_secs_f64();

    // training-set PSNR on the full images
    let mut psnr_sum = 0.0;
    for (idx, (_, hr)) in data.images.iter().enumerate() {
        let lr = gdsr_core::degrade::synthesize_lr(hr, &dcfg, idx as u64)?;
        let sr = no_grad(|| model.forward_image(&lr))?;
        let p = psnr_y(&sr, hr, 2)?;
        println!("image {idx}: psnr {p:.2}");
        psnr_sum += p;
    }
    println!(
        "steps {} ({} epochs), lr0 {lr0}, patch {patch}, batch {batch}: mean psnr {:.2} dB, loss {:.5} -> {:.5}, {:.1}s ({:.1} ms/step)",
        hist.rows.len(),
        epochs,
        psnr_sum / 4.0,
        hist.rows[0].loss,
        hist.final_loss().unwrap(),
        train_time,
        1000.0 * train_time / hist.rows.len() as f64
    );
    Ok(())
}
