"""Train a small model on ten synthetic pairs and watch it memorise them.

The teacher LM is trained and frozen first; the student then learns from the
gold reports and the teacher's soft targets at once.

    python demos/02_overfit_and_generate.py
"""
from cvaekd.corpus import build_vocabulary, synthetic_corpus
from cvaekd.metrics import EvalPair, format_table, score_all
from cvaekd.model import CvaeKdConfig, generate
from cvaekd.teacher import TeacherConfig, train_teacher
from cvaekd.training import fit

pairs = synthetic_corpus(10, seed=0)
vocab = build_vocabulary(pairs, min_tf=1)
print(f"{len(pairs)} pairs, vocabulary of {len(vocab)}")

teacher = train_teacher(pairs, vocab, TeacherConfig(emb_dim=16, hidden=16, epochs=30, lr=0.02,
                                                    batch_size=10, max_len=40, seed=0))
h = teacher.history
print(f"teacher perplexity  fwd {h[0]['ppl_forward']:.1f} -> {h[-1]['ppl_forward']:.1f}"
      f"   bwd {h[0]['ppl_backward']:.1f} -> {h[-1]['ppl_backward']:.1f}")

cfg = CvaeKdConfig(hidden=32, d_emb=16, d_z=8, lr=0.02, dropout_decoder=0.0, batch=10, epochs=200,
                   max_enc=30, max_dec=40, k_neighbors=3, kl_anneal_steps=100, min_tf=1,
                   teacher_hidden=16, teacher_emb=16, seed=0)
result = fit(pairs, vocab, cfg, teacher, max_steps=200)
for row in result.history[::40] + result.history[-1:]:
    print(f"step {row['step']:4d}  recon {row['recon']:.3f}  kl {row['kl']:.3f}  "
          f"l_kd {row['l_kd']:.3f}  total {row['total']:.3f}")

evals = []
for p in pairs:
    out = generate(p.news_tokens, result.model, teacher, result.kb, max_len=100, exclude_id=p.id)
    evals.append(EvalPair(tuple(out) or ("<empty>",), tuple(vocab.decode(vocab.encode(p.report_tokens)))))
print("\nnews     :", " ".join(pairs[0].news_tokens))
print("generated:", " ".join(evals[0].candidate))
print("reference:", " ".join(evals[0].reference))
print("\n" + format_table([("train set", score_all(evals))]))
