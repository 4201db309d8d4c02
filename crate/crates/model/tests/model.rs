use candle_core::{Device, Tensor};
use maediff_core::phantom::generate_phantom;
use maediff_core::{DiffusionConfig, NoiseSchedule, PatchGeometry, PatchPlan, SimplexParams};
use maediff_model::mae::{MaeConfig, MaeModule, TokenGrid};
use maediff_model::model::images_to_tensor;
use maediff_model::params::ParamStore;
use maediff_model::unet::UNetConfig;
use maediff_model::{MaeDiffModel, ModelConfig, TrainConfig, Trainer};
use ndarray::Array2;
use proptest::prelude::*;

fn tiny(attn: bool, mae: bool) -> ModelConfig {
    ModelConfig {
        geometry: PatchGeometry { height: 32, width: 32, patch: 16, stride: 8, grid: 8 },
        unet: UNetConfig {
            base_channels: 8,
            res_blocks_per_level: 1,
            attention_heads: 2,
            use_global_attention: attn,
            use_mae: mae,
            ..UNetConfig::default()
        },
        mae: MaeConfig { d1: 16, enc_blocks: 3, enc_heads: 2, d2: 16, dec_blocks: 2, dec_heads: 2, ..MaeConfig::default() },
        init_seed: 11,
    }
}

fn images(n: usize, seed: u64) -> Vec<Array2<f32>> {
    (0..n).map(|i| generate_phantom(seed + i as u64, (32, 32)).unwrap().image).collect()
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 2, learning_rate: 1e-3, val_every: 10, val_samples_per_image: 2, seed, ..TrainConfig::default() }
}

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(&DiffusionConfig::default()).unwrap()
}

struct MaeFixture {
    mae: MaeModule,
    store: ParamStore,
    plan: PatchPlan,
    grid: TokenGrid,
}

fn mae_fixture() -> MaeFixture {
    let plan = PatchPlan::new(PatchGeometry { height: 32, width: 32, patch: 16, stride: 8, grid: 8 }).unwrap();
    let (rows, cols) = plan.grid_dims();
    let grid = TokenGrid { channels: 4, cell: 2, rows, cols };
    let store = ParamStore::new(21);
    let cfg = MaeConfig { d1: 16, enc_blocks: 3, enc_heads: 2, d2: 24, dec_blocks: 2, dec_heads: 4, ..MaeConfig::default() };
    let mae = MaeModule::new(&store, &cfg, grid, 32).unwrap();
    MaeFixture { mae, store, plan, grid }
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn zero_cross_attention_ignores_latents() {
    let fx = mae_fixture();
    for (name, var) in fx.store.vars() {
        if name.contains(".cross.out.") {
            var.set(&var.zeros_like().unwrap()).unwrap();
        }
    }
    let f = Tensor::randn(0f32, 1.0, (1, 4, 8, 8), &Device::Cpu).unwrap();
    let a = fx.mae.encode_visible(&f, &[fx.plan.visible_grids(0).unwrap()]).unwrap();
    let b = fx.mae.encode_visible(&f, &[fx.plan.visible_grids(8).unwrap()]).unwrap();
    let za = fx.mae.decode(&f, &a, None).unwrap();
    let zb = fx.mae.decode(&f, &b, None).unwrap();
    assert_eq!(flat(&za), flat(&zb));
}

#[test]
fn cross_attention_carries_latents() {
    let fx = mae_fixture();
    let f = Tensor::randn(0f32, 1.0, (1, 4, 8, 8), &Device::Cpu).unwrap();
    let a = fx.mae.encode_visible(&f, &[fx.plan.visible_grids(0).unwrap()]).unwrap();
    let b = fx.mae.encode_visible(&f, &[fx.plan.visible_grids(8).unwrap()]).unwrap();
    assert_ne!(flat(&fx.mae.decode(&f, &a, None).unwrap()), flat(&fx.mae.decode(&f, &b, None).unwrap()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_never_sees_masked_grids(k in 0usize..9, seed in any::<u64>(), scale in 0.1f32..100.0) {
        let fx = mae_fixture();
        let g = fx.grid;
        let (h, w) = (g.rows * g.cell, g.cols * g.cell);
        let base = Tensor::randn(0f32, 1.0, (1, g.channels, h, w), &Device::Cpu).unwrap();
        let mut v = flat(&base);
        let mut state = seed | 1;
        for cell in fx.plan.grids_for_patch(k).unwrap() {
            let (gy, gx) = (cell / g.cols * g.cell, cell % g.cols * g.cell);
            for c in 0..g.channels {
                for y in gy..gy + g.cell {
                    for x in gx..gx + g.cell {
                        state ^= state << 13;
                        state ^= state >> 7;
                        state ^= state << 17;
                        v[(c * h + y) * w + x] += scale * ((state >> 40) as f32 / (1u64 << 24) as f32 - 0.5);
                    }
                }
            }
        }
        let perturbed = Tensor::from_vec(v, (1, g.channels, h, w), &Device::Cpu).unwrap();
        let vis = vec![fx.plan.visible_grids(k).unwrap()];
        let a = fx.mae.encode_visible(&base, &vis).unwrap();
        let b = fx.mae.encode_visible(&perturbed, &vis).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(flat(x), flat(y));
        }
    }
}

#[test]
fn directional_derivative_matches_finite_difference() {
    // The probe is a smooth weighted sum of the prediction: the l1 kinks of the training loss would bias
    // a finite difference, and the loss gradient itself is checked exactly elsewhere.
    let model = MaeDiffModel::new(&tiny(true, true)).unwrap();
    let imgs = images(2, 40);
    let dev = model.device();
    let x = images_to_tensor(imgs.iter().map(|a| a.view()), (32, 32), dev).unwrap();
    let w: Vec<f32> = (0..2 * 32 * 32).map(|i| (i * 7919 % 1013) as f32 / 1013.0 - 0.5).collect();
    let w = Tensor::from_vec(w, (2, 1, 32, 32), dev).unwrap();
    let probe = || (model.predict_x0(&x, &[4, 0], &[300, 50]).unwrap() * &w).unwrap().sum_all().unwrap();
    let grads = probe().backward().unwrap();

    let vars = model.params().vars();
    let dirs: Vec<Option<Tensor>> = vars.iter().map(|(_, v)| grads.get(v.as_tensor()).cloned()).collect();
    let norm2: f64 = dirs
        .iter()
        .flatten()
        .map(|g| g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() as f64)
        .sum();
    let norm = norm2.sqrt();
    assert!(norm > 0.0);
    let originals: Vec<Tensor> = vars.iter().map(|(_, v)| v.as_tensor().copy().unwrap()).collect();
    let eval_at = |step: f64| -> f64 {
        for ((_, v), (orig, dir)) in vars.iter().zip(originals.iter().zip(&dirs)) {
            if let Some(d) = dir {
                v.set(&(orig + (d * (step / norm)).unwrap()).unwrap()).unwrap();
            }
        }
        probe().to_scalar::<f32>().unwrap() as f64
    };
    let h = 3e-4;
    let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
    // Along the normalized gradient the directional derivative equals the gradient norm.
    assert!((fd - norm).abs() / norm < 1e-3, "finite difference {fd} vs gradient norm {norm}");
}

#[test]
fn training_is_deterministic() {
    let data = images(4, 60);
    let run = || {
        let model = MaeDiffModel::new(&tiny(true, true)).unwrap();
        let mut trainer = Trainer::new(&model, train_cfg(5), sched(), SimplexParams::default()).unwrap();
        let losses: Vec<f64> = (0..50)
            .map(|step| {
                let idx = trainer.batch_indices(step, data.len());
                let batch: Vec<&Array2<f32>> = idx.iter().map(|&i| &data[i]).collect();
                trainer.train_step(&batch).unwrap().loss
            })
            .collect();
        let params: Vec<Vec<f32>> = model.params().vars().iter().map(|(_, v)| flat(v.as_tensor())).collect();
        (losses, params)
    };
    assert_eq!(run(), run());
}

#[test]
fn overfits_a_single_image() {
    let model = MaeDiffModel::new(&tiny(false, true)).unwrap();
    let img = images(1, 80).remove(0);
    let cfg = TrainConfig { batch_size: 4, learning_rate: 3e-3, ..train_cfg(9) };
    let mut trainer = Trainer::new(&model, cfg, sched(), SimplexParams::default()).unwrap();
    let batch = vec![&img; 4];
    let losses: Vec<f64> = (0..80).map(|_| trainer.train_step(&batch).unwrap().loss).collect();
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[70..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.6 * head, "loss {head} -> {tail}");
}

#[test]
fn fit_keeps_best_validation_parameters() {
    let model = MaeDiffModel::new(&tiny(true, false)).unwrap();
    let (train, val) = (images(6, 100), images(2, 200));
    let cfg = TrainConfig { max_steps: Some(30), ..train_cfg(3) };
    let mut trainer = Trainer::new(&model, cfg.clone(), sched(), SimplexParams::default()).unwrap();
    let outcome = trainer.fit(&train, &val, |_| {}).unwrap();
    let vals: Vec<f64> = outcome.records.iter().filter_map(|r| r.val).collect();
    assert_eq!(outcome.steps, 30);
    assert!(vals.len() >= 4);
    assert!(outcome.best_val <= vals[0]);
    assert_eq!(outcome.best_val, vals.iter().copied().fold(f64::INFINITY, f64::min));

    // Restoring the retained parameters reproduces the best validation loss.
    model.params().load(&outcome.best_params).unwrap();
    let restored = Trainer::new(&model, cfg, sched(), SimplexParams::default()).unwrap();
    assert_eq!(restored.validate(&val).unwrap(), outcome.best_val);
}
