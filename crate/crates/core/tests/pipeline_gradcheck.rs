//! End-to-end finite-difference verification of the full two-stage loss
//! against the tape, in f64 on a tiny configuration. This exercises gradient
//! accumulation across the segmenter's two invocations (shared weights) and
//! the closed-loop path through the prompt encoder.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use tamperloc_core::dssn::DSSNConfig;
use tamperloc_core::losses;
use tamperloc_core::mae::MAEConfig;
use tamperloc_core::nn::{Fwd, ParamId};
use tamperloc_core::pipeline::{self, AblationFlags, Model};
use tamperloc_core::synth::{forge, generate_real, ForgeryKind, ForgeryRecord, SceneSpec};
use tamperloc_core::tapi::PromptEncoderConfig;

fn tiny_model(seed: u64) -> Model<f64> {
    let mae_cfg = MAEConfig {
        resolution: 32,
        patch_size: 8,
        encoder_depth: 1,
        decoder_depth: 1,
        dim: 16,
        decoder_dim: 8,
        heads: 2,
        mask_ratio: 0.9,
    };
    let dssn_cfg = DSSNConfig {
        stage_dims: vec![8, 16],
        stage_downsample: vec![4, 2],
        stage_heads: vec![1, 2],
        sr_ratios: vec![2, 1],
        decoder_dim: 16,
        fusion_feedforward: true,
        dual_stream: true,
    };
    let prompt_cfg = PromptEncoderConfig {
        channels: vec![4, 8],
        token_dim: 8,
    };
    let mut m = Model::build(
        mae_cfg,
        dssn_cfg,
        prompt_cfg,
        AblationFlags::default(),
        false,
        seed,
    )
    .unwrap();
    m.freeze_prior();
    m.sync_stage2_decoder();
    m
}

fn records() -> Vec<ForgeryRecord> {
    (0..2)
        .map(|i| {
            let img = generate_real(&SceneSpec::new(70 + i, 32), 8).unwrap();
            let mut r = forge(
                &img,
                [ForgeryKind::Splice, ForgeryKind::CopyMove][i as usize],
                i * 17 + 3,
                &Default::default(),
            )
            .unwrap();
            r.id = format!("p{i}");
            r
        })
        .collect()
}

fn loss_value(model: &Model<f64>, images: &Array4<f64>, targets: &Array4<f64>) -> f64 {
    let mut f = Fwd::eval(&model.store);
    let tv = pipeline::forward_vars(&mut f, model, images, None, true).unwrap();
    let tgt = f.tape.constant(targets.clone().into_dyn());
    let l_crs = losses::stage_loss(&mut f, tv.coarse_mask, tgt);
    let l_ref = losses::stage_loss(&mut f, tv.refined_mask, tgt);
    let total = losses::total_loss(&mut f, l_ref, l_crs, 0.5);
    f.tape.val(total)[[]]
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let mut model = tiny_model(5);
    // Move every zero-initialized projection off its blocking point so
    // gradients are generic, the way one optimizer step would.
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    for name in [
        "dssn.fusion.stage0.out.weight",
        "dssn.fusion.stage1.out.weight",
        "tapi.film.scale.weight",
        "tapi.film.shift.weight",
    ] {
        let id = model.store.id_of(name).unwrap();
        let shape = model.store.value(id).raw_dim();
        *model.store.value_mut(id) =
            ndarray::ArrayD::from_shape_fn(shape, |_| rng.gen_range(-0.05..0.05));
    }

    let recs = records();
    let refs: Vec<&ForgeryRecord> = recs.iter().collect();
    let images = tamperloc_core::synth::image_batch::<f64>(&refs);
    let targets = tamperloc_core::synth::mask_batch::<f64>(&refs);

    let mut f = Fwd::train(&model.store);
    let tv = pipeline::forward_vars(&mut f, &model, &images, None, true).unwrap();
    let tgt = f.tape.constant(targets.clone().into_dyn());
    let l_crs = losses::stage_loss(&mut f, tv.coarse_mask, tgt);
    let l_ref = losses::stage_loss(&mut f, tv.refined_mask, tgt);
    let total = losses::total_loss(&mut f, l_ref, l_crs, 0.5);
    let grads = f.backward_params(total);
    drop(f);

    // Sample parameters across every trainable group, including the shared
    // segmenter weights that receive gradients from both stages.
    let sampled = [
        "dssn.content.stage0.embed.proj.weight",
        "dssn.artifact.stage0.embed.proj.weight",
        "dssn.fusion.stage0.out.weight",
        "dssn.decoder.fuse.weight",
        "dssn.decoder.pred.bias",
        "tapi.prompt.conv0.weight",
        "tapi.film.scale.weight",
        "mae.decoder_stage2.pred.weight",
        "mae.decoder_stage2.mask_token",
    ];
    let h = 1e-5;
    for name in sampled {
        let id: ParamId = model.store.id_of(name).unwrap();
        let g = grads
            .get(id)
            .unwrap_or_else(|| panic!("no gradient for {name}"))
            .clone();
        let n = model.store.value(id).len();
        for flat in [0, n / 2, n - 1] {
            let orig = model.store.value(id).as_slice().unwrap()[flat];
            model.store.value_mut(id).as_slice_mut().unwrap()[flat] = orig + h;
            let plus = loss_value(&model, &images, &targets);
            model.store.value_mut(id).as_slice_mut().unwrap()[flat] = orig - h;
            let minus = loss_value(&model, &images, &targets);
            model.store.value_mut(id).as_slice_mut().unwrap()[flat] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = g.as_slice().unwrap()[flat];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
            assert!(
                rel < 1e-4,
                "{name}[{flat}]: analytic {an:.3e} vs fd {fd:.3e} (rel {rel:.2e})"
            );
        }
    }
}

#[test]
fn detach_prompt_blocks_the_closed_loop_gradient() {
    // With the prompt attached, the refinement loss reaches stage-1 weights
    // through the coarse mask; detaching must change those gradients.
    let recs = records();
    let refs: Vec<&ForgeryRecord> = recs.iter().collect();
    let images = tamperloc_core::synth::image_batch::<f64>(&refs);
    let targets = tamperloc_core::synth::mask_batch::<f64>(&refs);

    let grad_for = |detach: bool| {
        let mut model = tiny_model(5);
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for name in ["tapi.film.scale.weight", "tapi.film.shift.weight"] {
            let id = model.store.id_of(name).unwrap();
            let shape = model.store.value(id).raw_dim();
            *model.store.value_mut(id) =
                ndarray::ArrayD::from_shape_fn(shape, |_| rng.gen_range(-0.05..0.05));
        }
        if let Some(t) = model.tapi.as_mut() {
            t.detach_prompt = detach;
        }
        let mut f = Fwd::train(&model.store);
        let tv = pipeline::forward_vars(&mut f, &model, &images, None, true).unwrap();
        let tgt = f.tape.constant(targets.clone().into_dyn());
        // Refinement loss only, so any stage-1 gradient must flow through the
        // prompt path.
        let l_ref = losses::stage_loss(&mut f, tv.refined_mask, tgt);
        let grads = f.backward_params(l_ref);
        let id = model.store.id_of("dssn.decoder.pred.weight").unwrap();
        grads.get(id).map(|g| g.clone())
    };
    let attached = grad_for(false).expect("gradient with closed loop");
    let detached = grad_for(true).expect("gradient without closed loop");
    // The refined mask depends on stage-1 output either way (the segmenter is
    // shared), but the prompt path adds an extra term when attached.
    assert_ne!(attached, detached);
}
