"""Train the same model with and without the open-gate penalty and watch
where the attention mass goes.

A scaled-down version of the sweep the acceptance tests run: one joint
run at lambda = 0.9 against a lambda = 0 control on a 3k-pair copy
corpus.  The penalized run prunes a third or more of the source words
while still copying accurately, and the analysis reports show the
retained words absorbing the attention mass the pruned ones gave up.

Takes four to five minutes on one core:

    python demos/sparsity_sweep.py
"""

import time

import l0seq.tensor as tz

tz.set_mode("fast")

from l0seq.analysis import attention_mass, encoder_entropy
from l0seq.data import Corpus, make_toy_corpus
from l0seq.model import Model, ModelConfig
from l0seq.training import TrainConfig, evaluate, train

corpus = make_toy_corpus("copy", 50, 5, 20, 3000, 11)
train_c = Corpus(corpus.src[:2800], corpus.tgt[:2800],
                 corpus.src_vocab, corpus.tgt_vocab)
eval_c = Corpus(corpus.src[2800:], corpus.tgt[2800:],
                corpus.src_vocab, corpus.tgt_vocab)
mcfg = ModelConfig(src_vocab=len(corpus.src_vocab),
                   tgt_vocab=len(corpus.tgt_vocab),
                   d_model=64, n_heads=4, d_ffn=256, n_layers=2,
                   dropout=0.1, attn_dropout=0.0, max_len=64,
                   gate_layers=(2,))

models = {}
for lam in (0.0, 0.9):
    print(f"== training from scratch at lambda = {lam} ==")
    model = Model(mcfg, seed=3)
    tcfg = TrainConfig(steps=1500, batch_tokens=1024, lr_warmup=400, seed=3,
                       mode="scratch_l0drop", lam=lam,
                       lambda_warmup_steps=500, log_interval=250)
    t0 = time.time()
    res = train(model, train_c, tcfg)
    for row in res.log:
        print(f"  step {row['step']:>4}  mle {row['mle']:6.2f}  "
              f"open-count {row['l0']:5.2f}  "
              f"sampled sparsity {row['sampled_sparsity']:.3f}")
    ev = evaluate(model, eval_c, use_sparse=True)
    print(f"  {time.time() - t0:.0f}s; held-out token accuracy "
          f"{ev.token_accuracy:.3f}, corpus sparsity {ev.sparsity:.3f}")
    models[lam] = model

base, gated = models[0.0], models[0.9]
print()
print("== where the attention mass went ==")
mb = attention_mass(base, eval_c)
mg = attention_mass(gated, eval_c)
print(f"  control: mean mass per word {mb.mean_retained:.3f}, "
      f"{100 * mb.frac_below(1.0):.0f}% of words below one unit")
print(f"  gated:   mean mass per retained word {mg.mean_retained:.3f}, "
      f"{100 * mg.frac_below(1.0):.0f}% of retained words below one unit")

eb = encoder_entropy(base, eval_c)
eg = encoder_entropy(gated, eval_c)
print()
print("== how widely the kept encodings look around ==")
print(f"  control self-attention entropy {eb.retained_mean:.3f} "
      f"over {eb.n_retained} rows")
print(f"  gated: retained rows {eg.retained_mean:.3f} "
      f"({eg.n_retained}), pruned rows {eg.pruned_mean:.3f} "
      f"({eg.n_pruned})")
