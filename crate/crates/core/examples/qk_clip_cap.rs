//! One per-head QK-Clip on a hot-initialized model: clipped heads land on tau
//! when the same batch is run again, and other heads do not move.

use muonclip::model::{AttentionKind, InitMode, Model, ModelConfig, TokenBatch};
use muonclip::qkclip::{qk_clip_per_head, ClipPolicy, HeadParamRegistry};
use muonclip::Rng;

fn main() -> muonclip::Result<()> {
    // MLA logits run much cooler under the same init, so it gets a lower tau.
    for (kind, tau) in [(AttentionKind::Mha, 100.0), (AttentionKind::Mla, 6.0)] {
        let cfg = ModelConfig {
            attention_kind: kind,
            ..ModelConfig::default()
        };
        let mut rng = Rng::new(5);
        let mut model = Model::new(cfg.clone(), InitMode::Hot { scale: 40.0 }, &mut rng)?;
        let tokens = (0..4 * 33).map(|_| rng.below(cfg.vocab_size)).collect();
        let batch = TokenBatch::unmasked(4, 32, tokens)?;
        let pass = model.forward(&batch)?;
        let xs: Vec<_> = pass.attn_inputs.iter().map(|&n| pass.tape.value(n).clone()).collect();
        let before = pass.records;
        let registry = HeadParamRegistry::from_model(&model)?;
        let events = qk_clip_per_head(&mut model.params, &registry, &before, &ClipPolicy::per_head(tau), 1)?;
        println!("{kind:?}: {} of {} heads clipped at tau {tau}", events.len(), before.len());
        for (l, x) in xs.iter().enumerate() {
            let (_, _, after) = model.attention_forward(l, x, batch.batch, batch.seq)?;
            for (a, b) in after.iter().zip(&before[l * cfg.n_heads..]) {
                println!("  L{} H{}  s_max {:>10.4} -> {:>10.4}", a.layer, a.head, b.s_max, a.s_max);
            }
        }
    }
    Ok(())
}
