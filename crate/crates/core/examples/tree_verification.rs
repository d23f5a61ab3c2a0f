//! One verification step over a draft tree, done by hand.

use std::sync::Arc;

use specverify::model::{Model, ModelConfig};
use specverify::specdec::{probs_from_logits, propose_tree, verify_step, ModelDrafter};
use specverify::{Rng, SparsityPlan};

fn main() -> specverify::Result<()> {
    let target = Arc::new(Model::seeded(ModelConfig::default(), 1)?);
    let draft = Arc::new(Model::seeded(ModelConfig::draft_default(256), 2)?);
    let prompt = vec![5, 81, 12, 7, 200, 3];

    let mut session = target.session();
    session.prefill(&prompt[..prompt.len() - 1])?;
    session.set_pending(prompt[prompt.len() - 1])?;

    // top-3 at the first level, top-2 below each
    let mut drafter = ModelDrafter::new(draft, 1.0);
    let tree = propose_tree(&mut drafter, &prompt, &[3, 2], 16)?;
    for (i, n) in tree.nodes().iter().enumerate() {
        println!(
            "node {i:>2} parent {:?} token {:>3} draft p {:.3}",
            n.parent, n.token, n.draft_prob
        );
    }

    let out = session.verify_forward(&tree, &SparsityPlan::dense())?;
    let root = probs_from_logits(&out.root_logits, 1.0)?;
    let nodes = out
        .node_logits
        .iter()
        .map(|l| probs_from_logits(l, 1.0))
        .collect::<specverify::Result<Vec<_>>>()?;
    let outcome = verify_step(&tree, &root, &nodes, &mut Rng::new(7))?;
    println!("accepted path {:?}", outcome.accepted_path);
    println!("emitted {:?}", outcome.emitted_tokens);

    let bonus = *outcome.emitted_tokens.last().expect("one token at least");
    session.commit(&tree, &outcome.accepted_path, bonus)?;
    println!(
        "cache now holds {} positions, pending {:?}",
        session.cache().seq_len(),
        session.pending()
    );
    Ok(())
}
