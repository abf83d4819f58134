//! Mixed-precision KV cache: the system prompt's keys and values stay in
//! full precision, later tokens are stored quantized.
//!
//! `cargo run --release --example prompt_cache`

use bisup::model::{precompute_system_prompt, Model, ModelConfig, QuantizedModel};
use bisup::quant::{QuantConfig, QuantPlan};

fn main() -> bisup::Result<()> {
    let cfg = ModelConfig::default();
    let model = Model::first_token_dominant(&cfg, 1, 1.0)?;
    let prompt = [0, 17, 42];
    let user = [5, 9, 77, 120, 3];

    let plan = QuantPlan::from(&"W3A3-g16".parse::<QuantConfig>()?);
    let mut quant = QuantizedModel::rtn(model.clone(), plan)?;
    quant.prompt_mixed = true;

    let mut cache = quant.start_cache(&prompt)?;
    println!("after prompt: {} rows, boundary {}", cache.len(), cache.boundary());
    for &t in &user[..3] {
        quant.extend(&mut cache, &[t])?;
    }
    quant.extend(&mut cache, &user[3..])?;
    println!("after user tokens: {} rows, boundary {}", cache.len(), cache.boundary());

    let reference = precompute_system_prompt(&model, &[&prompt[..], &user[..]].concat())?;
    let (k_ref, v_ref) = reference.layer(0).materialize()?.expect("non-empty cache");
    let sq = |t: &bisup::Tensor, i: usize| t.row(i).iter().map(|v| v * v).sum::<f64>();
    for (row, (ek, ev)) in cache.row_errors(0, &k_ref, &v_ref)?.iter().enumerate() {
        let kind = if row < cache.boundary() { "fp " } else { "int" };
        println!(
            "layer 0 row {row} [{kind}] relative key err {:.3} value err {:.3}",
            ek / sq(&k_ref, row),
            ev / sq(&v_ref, row)
        );
    }
    Ok(())
}
