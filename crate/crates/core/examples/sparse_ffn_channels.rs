//! Channel pruning threshold sweep: FFN sparsity and FFN FLOPs per pass.

use std::sync::Arc;

use specverify::kernels::FlopCategory;
use specverify::model::{Model, ModelConfig};
use specverify::specdec::{propose_chain, ModelDrafter};
use specverify::{Rng, SparsityPlan};

fn main() -> specverify::Result<()> {
    let target = Arc::new(Model::seeded(ModelConfig::default(), 1)?);
    let draft = Arc::new(Model::seeded(ModelConfig::draft_default(256), 2)?);
    let prompt = vec![9, 14, 2, 77, 130, 41, 6];
    let mut base = target.session();
    base.prefill(&prompt[..6])?;
    base.set_pending(prompt[6])?;
    let tree = propose_chain(&mut ModelDrafter::new(draft, 1.0), &prompt, 4, &mut Rng::new(1))?;

    println!("{:>5}  {:>6}  {:>10}", "tau", "s_f", "ffn flops");
    for tau in [0.0f32, 0.01, 0.02, 0.05, 0.1, 0.2] {
        let mut s = base.clone();
        let plan = SparsityPlan {
            ffn_threshold: Some(tau),
            ..SparsityPlan::dense()
        };
        s.verify_forward(&tree, &plan)?;
        let flops = s.counter().since(base.counter()).get(FlopCategory::Ffn);
        println!("{tau:>5}  {:>6.3}  {flops:>10}", s.log().ffn_sparsity());
    }
    Ok(())
}
