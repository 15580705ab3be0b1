"""The command-line pipeline end to end in a scratch directory.

pretrain-teacher -> train -> generate -> evaluate, then the ablation and
length-sweep drivers. Equivalent shell commands are printed as they run.

    python demos/03_cli_pipeline.py [workdir]
"""
import json
import sys
import tempfile
from pathlib import Path

from cvaekd.cli import main
from cvaekd.corpus import load_corpus, synthetic_corpus, write_corpus

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="cvaekd_demo_"))
work.mkdir(parents=True, exist_ok=True)
write_corpus(work / "corpus.jsonl", synthetic_corpus(60, seed=3))
(work / "small.cfg").write_text(
    "hidden = 24\nd_z = 4\nd_emb = 12\nbatch = 8\nmax_enc = 16\nmax_dec = 40\nk_neighbors = 3\n"
    "kl_anneal_steps = 50\nmin_tf = 1\nepochs = 6\nlr = 0.01\nteacher_hidden = 12\nteacher_emb = 8\n"
    "teacher_epochs = 8\nseed = 7\n")


def cli(*args):
    args = [str(a) for a in args]
    print("\n$ cvaekd", " ".join(args))
    code = main(args)
    if code:
        sys.exit(f"exit code {code}")


corpus, cfg = work / "corpus.jsonl", work / "small.cfg"
cli("pretrain-teacher", "--corpus", corpus, "--config", cfg, "--out", work / "teacher")
cli("train", "--corpus", corpus, "--config", cfg, "--teacher", work / "teacher" / "teacher.json",
    "--out", work / "run")
cli("generate", "--corpus", corpus, "--checkpoint", work / "run" / "best.json", "--max-len", 100,
    "--out", work / "run" / "test_generated.jsonl")
refs = work / "test_refs.jsonl"
test_ids = set((work / "run" / "splits" / "test.txt").read_text().split())
refs.write_text("".join(json.dumps({"id": p.id, "report": " ".join(p.report_tokens)}) + "\n"
                        for p in load_corpus(corpus) if p.id in test_ids))
cli("evaluate", "--predictions", work / "run" / "test_generated.jsonl", "--references", refs,
    "--out", work / "run" / "eval")
cli("ablate", "--corpus", corpus, "--config", cfg, "--teacher", work / "teacher" / "teacher.json",
    "--max-len", 100, "--out", work / "ablation")
cli("sweep-length", "--corpus", corpus, "--checkpoint", work / "run" / "best.json", "--out", work / "sweep")
print(f"\nartifacts in {work}")
