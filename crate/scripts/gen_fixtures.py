#!/usr/bin/env python3
"""Regenerates the frozen oracle fixtures under crates/core/tests/fixtures.

Everything here is written independently of the Rust code: tokenization uses
nltk's Porter stemmer (MARTIN_EXTENSIONS mode), scoring and metrics are
straightforward per-document / per-topic loops.

    pip install nltk
    python3 scripts/gen_fixtures.py
"""

import hashlib
import json
import math
import re
from pathlib import Path

from nltk.stem.porter import PorterStemmer

ROOT = Path(__file__).resolve().parent.parent
FIX = ROOT / "crates" / "core" / "tests" / "fixtures"
STOP = set((ROOT / "crates" / "core" / "resources" / "stopwords.txt").read_text().split())
STEMMER = PorterStemmer(mode=PorterStemmer.MARTIN_EXTENSIONS)


def analyze(text):
    out = []
    for w in re.split(r"[^0-9a-z]+", text.lower()):
        if w and w not in STOP:
            out.append(STEMMER.stem(w, to_lowercase=False))
    return out


def load_collection(path):
    docs = []
    for line in path.read_text().splitlines():
        if line.strip():
            docno, text = line.split("\t", 1)
            docs.append((docno.strip(), analyze(text)))
    return docs


def dph(tf, dl, F, N, avgdl, qtf):
    f = tf / dl
    if f >= 1.0:
        f = (dl - 0.5) / dl
    norm = (1 - f) ** 2 / (tf + 1)
    return qtf * norm * (tf * math.log2(tf * avgdl / dl * N / F) + 0.5 * math.log2(2 * math.pi * tf * (1 - f)))


def bm25(tf, dl, df, N, avgdl, qtf, k1=1.2, b=0.75):
    idf = math.log((N - df + 0.5) / (df + 0.5) + 1)
    return qtf * idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))


def brute_search(docs, query, k, model):
    N = len(docs)
    avgdl = sum(len(t) for _, t in docs) / N
    qtf = {}
    for t in analyze(query):
        qtf[t] = qtf.get(t, 0) + 1
    hits = []
    for docno, terms in docs:
        score, matched = 0.0, False
        for term in sorted(qtf):
            tf = terms.count(term)
            if tf == 0:
                continue
            matched = True
            if model == "dph":
                F = sum(t.count(term) for _, t in docs)
                score += dph(tf, len(terms), F, N, avgdl, qtf[term])
            else:
                df = sum(1 for _, t in docs if term in t)
                score += bm25(tf, len(terms), df, N, avgdl, qtf[term])
        if matched:
            hits.append((docno, score))
    hits.sort(key=lambda h: (-h[1], h[0]))
    return hits[:k]


def run_lines(results, tag):
    lines = []
    for qid, hits in results:
        for rank, (docno, score) in enumerate(hits, 1):
            lines.append(f"{qid} Q0 {docno} {rank} {score:.6f} {tag}\n")
    return "".join(lines)


def read_keyed(path):
    rows = []
    for line in path.read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, v = line.split("\t", 1)
            rows.append((k, v))
    return rows


def read_qrels(path):
    q = {}
    for line in path.read_text().splitlines():
        if line.strip():
            qid, _, docno, g = line.split()
            q.setdefault(qid, {})[docno] = int(g)
    return q


def read_run(path):
    r = {}
    for line in path.read_text().splitlines():
        if line.strip():
            qid, _, docno, rank, score, _ = line.split()
            r.setdefault(qid, []).append((docno, int(rank), float(score)))
    for qid in r:
        r[qid].sort(key=lambda e: (-e[2], e[1], e[0]))
        r[qid] = [d for d, _, _ in r[qid]]
    return r


def metrics_for(ranking, judged, thr=1):
    rel = {d for d, g in judged.items() if g >= thr}
    out = {}
    rr = 0.0
    for i, d in enumerate(ranking):
        if d in rel:
            rr = 1 / (i + 1)
            break
    out["MRR"] = rr
    out["P@1"] = sum(1 for d in ranking[:1] if d in rel) / 1
    ideal = sorted(judged.values(), reverse=True)[:3]
    idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
    if idcg > 0:
        dcg = sum(judged.get(d, 0) / math.log2(i + 2) for i, d in enumerate(ranking[:3]))
        out["NDCG@3"] = dcg / idcg
    out["R@500"] = len(rel & set(ranking[:500])) / len(rel)
    return out


def evaluate(run, qrels):
    per = {}
    for qid, judged in qrels.items():
        if not any(g >= 1 for g in judged.values()):
            continue
        per[qid] = metrics_for(run.get(qid, []), judged)
    means = {}
    for m in ["MRR", "P@1", "NDCG@3", "R@500"]:
        vals = [v[m] for v in per.values() if m in v]
        means[m] = sum(vals) / len(vals) if vals else 0.0
    return per, means


def porter_vocab():
    words = set()
    for text in [
        "caresses ponies ties caress cats feed agreed plastered bled motoring sing "
        "conflated troubled sized hopping tanned falling hissing fizzed failing filing "
        "happy sky relational conditional rational valenci hesitanci digitizer conformabli "
        "radicalli differentli vileli analogousli vietnamization predication operator "
        "feudalism decisiveness hopefulness callousness formaliti sensitiviti sensibiliti "
        "triplicate formative formalize electriciti electrical hopeful goodness revival "
        "allowance inference airliner gyroscopic adjustable defensible irritant replacement "
        "adjustment dependent adoption homologou communism activate angulariti homologous "
        "effective bowdlerize probate rate cease controll roll generalization oscillators "
        "archaeology analogical apology generously abundantli anthropologi",
    ]:
        words.update(text.split())
    for path in [FIX / "toy" / "collection.tsv", FIX / "conv31_topics.json"]:
        words.update(w for w in re.split(r"[^a-z]+", path.read_text().lower()) if w)
    # Plain English from the standard library's own documentation strings.
    english = set()
    for path in sorted(Path(json.__file__).resolve().parent.parent.glob("*.py")):
        text = path.read_text(errors="ignore")
        for doc in re.findall(r'"""(.*?)"""', text, re.S):
            english.update(w for w in re.findall(r"\b[a-z]{3,}\b", doc))
    ordered = sorted(english, key=lambda w: (hashlib.sha256(w.encode()).hexdigest(), w))
    words.update(ordered[:4000])
    return sorted(words)


def main():
    docs = load_collection(FIX / "toy" / "collection.tsv")
    queries = read_keyed(FIX / "toy" / "queries4.tsv")
    for model in ["dph", "bm25"]:
        results = [(qid, brute_search(docs, text, 10, model)) for qid, text in queries]
        (FIX / "toy" / f"golden_search_{model}.run").write_text(run_lines(results, "first"))
        if model == "dph":
            terms = dict(docs)
            reranked = []
            for (qid, text), (_, hits) in zip(queries, results):
                q = set(analyze(text))
                scored = [(d, len(q & set(terms[d])) / len(q), i) for i, (d, _) in enumerate(hits)]
                scored.sort(key=lambda x: (-x[1], x[2], x[0]))
                reranked.append((qid, [(d, sc) for d, sc, _ in scored]))
            (FIX / "toy" / "golden_rerank_overlap.run").write_text(run_lines(reranked, "rerank"))

    qrels = read_qrels(FIX / "eval3" / "qrels.txt")
    run = read_run(FIX / "eval3" / "run.txt")
    per, means = evaluate(run, qrels)
    (FIX / "eval3" / "golden_report.json").write_text(
        json.dumps({"per_topic": per, "means": means}, indent=2) + "\n"
    )

    with open(FIX / "porter_vocab.tsv", "w") as f:
        for w in porter_vocab():
            f.write(f"{w}\t{STEMMER.stem(w, to_lowercase=False)}\n")

    # Direction check for the end-to-end fixture.
    topics = json.loads((FIX / "toy" / "topics.json").read_text())
    tq = read_qrels(FIX / "toy" / "qrels.txt")
    for field in ["raw_utterance", "manual_utterance"]:
        run = {}
        for conv in topics:
            for t in conv["turns"]:
                qid = f"{conv['number']}_{t['number']}"
                run[qid] = [d for d, _ in brute_search(docs, t[field], 1000, "dph")]
        _, means = evaluate(run, tq)
        print(field, {k: round(v, 4) for k, v in means.items()})


if __name__ == "__main__":
    main()
