// scratch: is there any gradient into m_crs via the prompt path?
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use tamperloc_core::dssn::DSSNConfig;
use tamperloc_core::losses;
use tamperloc_core::mae::MAEConfig;
use tamperloc_core::nn::Fwd;
use tamperloc_core::pipeline::{self, AblationFlags, Model};
use tamperloc_core::synth::{forge, generate_real, ForgeryKind, SceneSpec};
use tamperloc_core::tapi::PromptEncoderConfig;

#[test]
fn debug_detach() {
    let mae_cfg = MAEConfig { resolution: 32, patch_size: 8, encoder_depth: 1, decoder_depth: 1, dim: 16, decoder_dim: 8, heads: 2, mask_ratio: 0.9 };
    let dssn_cfg = DSSNConfig { stage_dims: vec![8, 16], stage_downsample: vec![4, 2], stage_heads: vec![1, 2], sr_ratios: vec![2, 1], decoder_dim: 16, fusion_feedforward: true, dual_stream: true };
    let prompt_cfg = PromptEncoderConfig { channels: vec![4, 8], token_dim: 8 };
    let mut model: Model<f64> = Model::build(mae_cfg, dssn_cfg, prompt_cfg, AblationFlags::default(), false, 5).unwrap();
    model.freeze_prior();
    model.sync_stage2_decoder();
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    for name in ["tapi.film.scale.weight", "tapi.film.shift.weight"] {
        let id = model.store.id_of(name).unwrap();
        let shape = model.store.value(id).raw_dim();
        *model.store.value_mut(id) = ndarray::ArrayD::from_shape_fn(shape, |_| rng.gen_range(-0.5..0.5));
    }
    let img = generate_real(&SceneSpec::new(70, 32), 8).unwrap();
    let rec = forge(&img, ForgeryKind::Splice, 3, &Default::default()).unwrap();
    let refs = vec![&rec];
    let images: Array4<f64> = tamperloc_core::synth::image_batch(&refs);
    let targets: Array4<f64> = tamperloc_core::synth::mask_batch(&refs);

    let mut f = Fwd::train(&model.store);
    let tv = pipeline::forward_vars(&mut f, &model, &images, None, true).unwrap();
    let tgt = f.tape.constant(targets.clone().into_dyn());
    let l_ref = losses::stage_loss(&mut f, tv.refined_mask, tgt);
    let grads = f.tape.backward(l_ref);
    // gradient arriving at the coarse-mask node itself
    let g_mcrs = grads.get(tv.coarse_mask);
    println!("grad at m_crs: {:?}", g_mcrs.map(|g| g.iter().map(|x| x.abs()).sum::<f64>()));
    let g_gamma = tv.gamma.and_then(|v| grads.get(v).cloned());
    println!("grad at gamma: {:?}", g_gamma.map(|g| g.iter().map(|x| x.abs()).sum::<f64>()));
    let g_prompts = tv.prompts.and_then(|v| grads.get(v).cloned());
    println!("grad at prompts: {:?}", g_prompts.map(|g| g.iter().map(|x| x.abs()).sum::<f64>()));
}
