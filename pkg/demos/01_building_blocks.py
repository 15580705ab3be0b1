"""Walk through the pieces: autograd check, Gaussian algebra, retrieval, metrics.

    python demos/01_building_blocks.py
"""
import numpy as np

from cvaekd.corpus import synthetic_corpus
from cvaekd.latent import GaussianParams, kl_divergence, product_of_experts
from cvaekd.metrics import EvalPair, score_all
from cvaekd.numerics import Tensor, finite_difference_check, matmul, tanh, tsum
from cvaekd.retrieval import build_index, query_neighbors


def gaussian(mu, var):
    return GaussianParams(Tensor(np.array([mu], float)), Tensor(np.log([var])))


rng = np.random.default_rng(0)
W = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
x = Tensor(rng.normal(size=(2, 3)))
err = finite_difference_check(lambda: tsum(tanh(matmul(x, W))), [W])
print(f"tape gradient vs central differences: max relative error {err:.2e}")

print("KL(N(1,1) || N(0,1))  =", kl_divergence(gaussian(1, 1), gaussian(0, 1)).item())
print("KL(N(0,4) || N(0,1))  =", kl_divergence(gaussian(0, 4), gaussian(0, 1)).item())
fused = product_of_experts(gaussian(0, 1), gaussian(2, 1))
print("N(0,1) x N(2,1) fused =", f"N({fused.mu.data[0]:.3f}, {fused.var[0]:.3f})")

pairs = synthetic_corpus(50, seed=1)
index = build_index(pairs)
query = pairs[0]
print("\nnews:", " ".join(query.news_tokens))
for pid in query_neighbors(index, query.news_tokens, k=3, exclude_id=query.id):
    print("  neighbour", pid, ":", " ".join(next(p for p in pairs if p.id == pid).news_tokens))

scores = score_all([EvalPair.of("the cat sat", "the cat sat down"), EvalPair.of("a c b", "a b c")])
print("\n" + "  ".join(f"{k}={v:.2f}" for k, v in scores.items() if k != "n_pairs"))
