use bisup::calib::{calibrate_model, CalibConfig, LayerData};
use bisup::data::{DataSpec, Dataset};
use bisup::model::{
    layer_forward, precompute_system_prompt, trace_propagation, Model, ModelConfig, QuantizedModel, TraceTag,
};
use bisup::quant::{QuantConfig, QuantPlan};
use bisup::Tensor;

fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        d_hidden: 32,
        vocab: 32,
        ..ModelConfig::default()
    }
}

fn plan(s: &str) -> QuantPlan {
    QuantPlan::from(&s.parse::<QuantConfig>().unwrap())
}

fn data(prompt_len: usize) -> Dataset {
    let spec = DataSpec {
        samples: 6,
        seq_len: 10,
        prompt_len,
    };
    Dataset::calibration(&spec, 32, 5).unwrap()
}

#[test]
fn targets_match_an_independent_full_precision_run() {
    let model = Model::random(&small_config(), 2).unwrap();
    let data = data(2);
    let p = data.prompt.len();
    let mut x_fp: Vec<Tensor> = (0..data.sequences.len())
        .map(|i| model.embed(&data.full_sequence(i)).unwrap())
        .collect();
    for (l, layer) in model.layers.iter().enumerate() {
        let ld = LayerData::new(layer, &x_fp, x_fp.clone(), None, p).unwrap();
        for (i, target) in ld.target.iter().enumerate() {
            let full = model.forward_layers(&data.full_sequence(i)).unwrap();
            assert_eq!(
                *target,
                full[l].slice_rows(p..full[l].rows()).unwrap(),
                "layer {l} seq {i}"
            );
        }
        x_fp = x_fp.iter().map(|x| layer.forward(x).unwrap()).collect();
    }
}

#[test]
fn disabled_quantization_calibrates_to_zero_loss() {
    let model = Model::random(&small_config(), 3).unwrap();
    for mixed in [false, true] {
        let cfg = CalibConfig {
            epochs: 1,
            batch_size: 3,
            rank: 2,
            prompt_mixed: mixed,
            ..CalibConfig::default()
        };
        let c = calibrate_model(&model, &data(3), &QuantPlan::disabled(), &cfg, 0).unwrap();
        for l in &c.layers {
            assert_eq!(l.initial_loss, 0.0, "mixed {mixed}");
            assert_eq!(l.final_loss, 0.0, "mixed {mixed}");
        }
        let t = trace_propagation(&model, &c.model, &data(3), TraceTag::Calib).unwrap();
        assert!(t.layer_mse.iter().all(|&m| m == 0.0), "{:?}", t.layer_mse);
    }
}

#[test]
fn calibration_with_neutral_theta_reproduces_plain_rtn() {
    let model = Model::random(&small_config(), 4).unwrap();
    let p = plan("W4A4-g8");
    let cfg = CalibConfig {
        epochs: 0,
        rank: 2,
        prompt_mixed: false,
        act_clip_init: 1.0,
        weight_clip_search: false,
        ..CalibConfig::default()
    };
    let c = calibrate_model(&model, &data(1), &p, &cfg, 9).unwrap();
    let rtn = QuantizedModel::rtn(model.clone(), p).unwrap();
    let d = data(1);
    for i in 0..d.sequences.len() {
        assert_eq!(
            c.model.forward_layers(&d.prompt, &d.sequences[i]).unwrap(),
            rtn.forward_layers(&d.prompt, &d.sequences[i]).unwrap()
        );
    }
}

#[test]
fn incremental_decoding_matches_batch_bit_exactly() {
    let model = Model::random(&small_config(), 6).unwrap();
    let prompt = [0, 7, 9];
    let user = [3, 4, 31, 12, 8, 1];
    for mixed in [false, true] {
        let mut q = QuantizedModel::rtn(model.clone(), plan("W3A3-g8")).unwrap();
        q.prompt_mixed = mixed;
        let batch = q.forward_layers(&prompt, &user).unwrap();
        let last = batch.last().unwrap();

        let mut cache = q.start_cache(&prompt).unwrap();
        for (t, &tok) in user.iter().enumerate() {
            let out = q.extend(&mut cache, &[tok]).unwrap();
            assert_eq!(out.row(0), last.row(t), "mixed {mixed} token {t}");
        }
        assert_eq!(cache.len(), prompt.len() + user.len());
        assert_eq!(cache.boundary(), if mixed { prompt.len() } else { 0 });

        let mut chunked = q.start_cache(&prompt).unwrap();
        let a = q.extend(&mut chunked, &user[..2]).unwrap();
        let b = q.extend(&mut chunked, &user[2..]).unwrap();
        assert_eq!(Tensor::concat_rows(&[&a, &b]).unwrap(), *last);
    }
}

#[test]
fn precomputed_prompt_matches_full_precision_internals() {
    let model = Model::random(&small_config(), 7).unwrap();
    let prompt = [0, 5, 6, 2];
    let cache = precompute_system_prompt(&model, &prompt).unwrap();
    assert_eq!(cache.boundary(), prompt.len());
    let mut x = model.embed(&prompt).unwrap();
    for (l, layer) in model.layers.iter().enumerate() {
        let pass = layer_forward(layer, &x, None, None, None).unwrap();
        let (k, v) = cache.layer(l).materialize().unwrap().unwrap();
        assert_eq!(k, pass.k, "layer {l}");
        assert_eq!(v, pass.v, "layer {l}");
        assert!(cache.layer(l).blocks.iter().all(|b| b.is_full_precision()));
        x = pass.output;
    }
}

#[test]
fn full_precision_prompt_rows_are_exact_and_user_rows_are_quantized() {
    let model = Model::random(&small_config(), 8).unwrap();
    let prompt = [0, 11];
    let user = [4, 5, 6];
    let mut q = QuantizedModel::rtn(model.clone(), plan("W4A4-g8")).unwrap();
    q.prompt_mixed = true;
    let mut cache = q.start_cache(&prompt).unwrap();
    q.extend(&mut cache, &user).unwrap();
    assert_eq!(cache.boundary(), 2);
    assert!(!cache.layer(0).blocks.last().unwrap().is_full_precision());

    let reference = precompute_system_prompt(&model, &[&prompt[..], &user[..]].concat()).unwrap();
    let (k_ref, v_ref) = reference.layer(0).materialize().unwrap().unwrap();
    let errs = cache.row_errors(0, &k_ref, &v_ref).unwrap();
    assert_eq!(errs.len(), 5);
    assert_eq!(errs[0], (0.0, 0.0));
    assert_eq!(errs[1], (0.0, 0.0));
    assert!(errs[2..].iter().all(|&(k, v)| k > 0.0 && v > 0.0));
}

#[test]
fn full_precision_block_after_a_quantized_one_is_rejected() {
    let model = Model::random(&small_config(), 9).unwrap();
    let q = QuantizedModel::rtn(model, plan("W4A4")).unwrap();
    let mut cache = q.start_cache(&[0]).unwrap();
    assert_eq!(cache.boundary(), 0);
    let k = Tensor::zeros(&[1, 16]);
    assert!(cache.append_full(0, k.clone(), k).is_err());
}

#[test]
fn first_token_construction_concentrates_attention() {
    let cfg = ModelConfig::default();
    let dominant = Model::first_token_dominant(&cfg, 1, 1.0).unwrap();
    let plain = Model::random(&cfg, 1).unwrap();
    let tokens: Vec<usize> = [0].into_iter().chain((0..15).map(|i| 1 + (i * 37) % 255)).collect();
    let mass = |m: &Model| {
        let x = m.embed(&tokens).unwrap();
        let pass = layer_forward(&m.layers[0], &x, None, None, None).unwrap();
        pass.cache.first_token_attention()
    };
    let (d, p) = (mass(&dominant), mass(&plain));
    assert!(d > 0.5 && d > 3.0 * p, "dominant {d} plain {p}");
}
