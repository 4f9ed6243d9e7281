"""Train a small transducer and tabulate how tree-structure scores move.

The point of the dynamics report: as the model learns the task, the induced
trees both pull away from random-split baselines (t_score) and drift toward
the gold bracketings (t_parseval).  This demo uses a reduced corpus and step
count so it finishes in about half a minute; the acceptance suite runs the
full-size version three times with significance tests.
"""

import time

from spantree.datasets import DEFAULT_UNSEEN, generate_expressions, make_cg_split
from spantree.encoder import EncoderConfig
from spantree.experiments import dynamics_report
from spantree.training import train_seq2seq

examples = generate_expressions(1600, depth_range=(1, 3), seed=3, alphabet_size=10)
corpus = make_cg_split(examples, DEFAULT_UNSEEN, seed=3, val_frac=0.1)
print(f"corpus: {len(corpus.train)} train / {len(corpus.iid_val)} iid "
      f"/ {len(corpus.cg_test)} cg, vocab {len(corpus.vocab)}")

config = EncoderConfig(enc_layers=2, dec_layers=1, heads=4, d_model=32,
                       d_ff=128, vocab_size=len(corpus.vocab), max_len=40)
start = time.time()
series = train_seq2seq(config, corpus, steps=2000, checkpoint_every=200,
                       seed=0, batch_size=32, base_lr=1e-3, warmup_steps=200,
                       eval_limit=40)
print(f"trained {series[-1].step} steps in {time.time() - start:.0f}s")

result = dynamics_report(series, corpus, threshold_mode="fixed", fixed_t=1,
                         eval_sentences=16, samples_per_node=4, seed=0)

print(f"\n{'step':>6} {'t_score':>9} {'t_parseval':>11} {'iid':>6} {'cg':>6}")
for rec in result.records:
    print(f"{rec.step:>6} {rec.t_score:>9.4f} {rec.t_parseval:>11.3f} "
          f"{rec.iid_acc:>6.2f} {rec.cg_acc:>6.2f}")

rho, p = result.correlations["rho_t_score_step"]
print(f"\nspearman(t_score, step): rho = {rho:+.3f}  p = {p:.3g}")
