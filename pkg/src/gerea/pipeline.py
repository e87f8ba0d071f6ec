"""Stage orchestration: regions -> captions -> exemplars -> train -> predict -> ensemble -> evaluate -> analyze.

Every stage records a cumulative config hash and artifact checksums in
``manifest.json``. A stage whose hash and checksums already match is skipped;
a stage whose previous output came from a different config is refused unless
``force`` is set.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

from ._hashing import derive_seed, file_checksum, stable_hash
from .caption_engine import CaptionCache, CaptionRecord, CaptionSet, MockCaptionBackend, generate_captions, merge_caption_sets
from .config import STAGES, RunConfig, checkpoint_cache_dir
from .data_io import SCHEMA_VERSION, load_dataset, read_artifact, read_json, write_artifact, write_json
from .exceptions import ArtifactError, StageError
from .exemplar_store import Exemplar, ExemplarIndex
from .metrics import answer_hit_rate, answer_noise_rate, behavior_analysis, evaluate, render_category_table, select_mc_option
from .prompt_builder import auxiliary_prompt, render_prompts
from .reasoner.ensemble import ensemble_vote, vote_counts
from .reasoner.estimator import FiDReader, ReaderInput
from .reasoner.passages import passage_template_hash
from .reasoner.visual import SyntheticVisualEncoder
from .region_selector import RegionSet, SyntheticITE, compute_relevance, image_key, sample_regions

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"

# Artifact each stage needs from upstream, and the command that produces it.
REQUIRES = {
    "captions": [("regions", "regions.jsonl")],
    "exemplars": [("captions", "captions.jsonl")],
    "train": [("exemplars", "neighbors.jsonl")],
    "predict": [("train", "checkpoints")],
    "ensemble": [("predict", "predictions_seed*.jsonl")],
    "evaluate": [("predict", "predictions.jsonl"), ("captions", "zeroshot.jsonl")],
    "analyze": [("evaluate", "report.json")],
}


def _device() -> str:
    import torch

    return "cuda" if torch.cuda.is_available() else "cpu"


class Pipeline:
    """Run stages for one :class:`RunConfig`.

    ``backends``, ``ite`` and ``visual_encoder`` may be injected (tests); by
    default they are built from the config.
    """

    def __init__(self, cfg: RunConfig, force: bool = False, backends=None, ite=None, visual_encoder=None):
        self.cfg = cfg
        self.force = force
        self.out = cfg.out
        self._backends = backends
        self._ite = ite
        self._visual_encoder = visual_encoder
        self._samples = None
        self._hashes = None
        self._visual_cache = {}

    # -- inputs ------------------------------------------------------------------

    @property
    def samples(self) -> dict:
        if self._samples is None:
            ds = self.cfg.dataset
            splits = {"train": ds.train_split, "eval": ds.eval_split}
            if ds.dev_split:
                splits["dev"] = ds.dev_split
            self._samples = {}
            for role, split in splits.items():
                items = load_dataset(ds.name, split, self.cfg.data_root, answer_field=ds.answer_field)
                self._samples[role] = items[: ds.limit] if ds.limit else items
        return self._samples

    def all_samples(self) -> list:
        seen, out = set(), []
        for role in ("train", "eval", "dev"):
            for s in self.samples.get(role, []):
                if s.sample_id not in seen:
                    seen.add(s.sample_id)
                    out.append(s)
        return out

    def data_fingerprint(self) -> str:
        rows = []
        for role, items in sorted(self.samples.items()):
            for s in items:
                rows.append((role, s.sample_id, s.question, list(s.human_answers), s.category,
                             Path(s.image_ref).name, s.image_missing, s.mc_options and list(s.mc_options)))
        return stable_hash(rows)

    @property
    def hashes(self) -> dict:
        if self._hashes is None:
            fp = self.data_fingerprint()
            self._hashes = {k: stable_hash(v, fp) for k, v in self.cfg.stage_hashes().items()}
        return self._hashes

    @property
    def ite(self):
        if self._ite is None:
            c = self.cfg.ite
            if c.kind == "synthetic":
                self._ite = SyntheticITE(n_patches=c.n_patches, n_heads=c.n_heads, seed=self.cfg.seed)
            elif c.kind == "blip":
                from .hf_backends import BlipITE

                self._ite = BlipITE(c.checkpoint or "Salesforce/blip-itm-base-coco", device=_device())
            else:
                raise StageError(f"unknown ite.kind {c.kind!r}")
        return self._ite

    @property
    def backends(self) -> list:
        if self._backends is None:
            answers = {s.sample_id: s.answer for s in self.all_samples() if s.human_answers}
            built = []
            for b in self.cfg.backends:
                if b.kind == "mock":
                    built.append(MockCaptionBackend.embedding_fraction(
                        b.embed_fraction, seed=self.cfg.seed, style=b.style, answers=answers,
                        backend_id=b.backend_id, zero_shot_accuracy=b.zero_shot_accuracy))
                else:
                    from .hf_backends import caption_backend

                    built.append(caption_backend(b.kind, b.checkpoint, backend_id=b.backend_id, style=b.style,
                                                 n_patches=self.ite.n_patches, device=_device()))
            self._backends = built
        return self._backends

    @property
    def visual_encoder(self):
        if self._visual_encoder is None:
            v = self.cfg.visual
            if v.encoder == "none":
                return None
            if v.kind == "synthetic":
                self._visual_encoder = SyntheticVisualEncoder(v.encoder, seed=self.cfg.seed)
            else:
                from .hf_backends import DetrEncoder

                self._visual_encoder = DetrEncoder(v.checkpoint or "facebook/detr-resnet-101-dc5", device=_device())
        return self._visual_encoder

    def _map(self, fn, items):
        if self.cfg.workers <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            return list(pool.map(fn, items))

    # -- manifest ------------------------------------------------------------------

    def manifest(self) -> dict:
        path = self.out / MANIFEST
        if not path.is_file():
            return {"schema_version": SCHEMA_VERSION, "stages": {}}
        return read_json(path)

    def _record(self, stage: str, artifacts: list[str]):
        m = self.manifest()
        m["stages"][stage] = {
            "hash": self.hashes[stage],
            "artifacts": {a: file_checksum(self.out / a) for a in sorted(artifacts)},
        }
        write_json(m, self.out / MANIFEST)

    def _up_to_date(self, stage: str) -> bool:
        entry = self.manifest()["stages"].get(stage)
        if not entry or entry["hash"] != self.hashes[stage]:
            return False
        for name, digest in entry["artifacts"].items():
            p = self.out / name
            if not p.is_file() or file_checksum(p) != digest:
                return False
        return True

    def _check_upstream(self, stage: str):
        entries = self.manifest()["stages"]
        for up, artifact in REQUIRES.get(stage, []):
            entry = entries.get(up)
            if entry is None or not entry["artifacts"]:
                raise StageError(f"`gerea {stage}` needs {artifact} in {self.out}; run `gerea {up}` first")
            for name in entry["artifacts"]:
                if not (self.out / name).is_file():
                    raise StageError(f"`gerea {stage}` needs {name} in {self.out}; run `gerea {up}` first")
            if entry["hash"] != self.hashes[up] and not self.force:
                raise StageError(
                    f"{up} artifacts in {self.out} were produced under a different config; "
                    f"rerun `gerea {up}` or pass --force"
                )

    def _check_own(self, stage: str):
        entry = self.manifest()["stages"].get(stage)
        if entry and entry["hash"] != self.hashes[stage] and not self.force:
            present = [a for a in entry["artifacts"] if (self.out / a).exists()]
            if present:
                raise StageError(
                    f"{stage} artifacts in {self.out} ({', '.join(present[:3])}) come from a different config "
                    f"(hash {entry['hash']} vs {self.hashes[stage]}); pass --force to overwrite"
                )

    def run_stage(self, stage: str) -> str:
        """Run one stage; returns ``'skipped'`` or ``'done'``."""
        if stage not in STAGES:
            raise StageError(f"unknown stage {stage!r}")
        self._check_upstream(stage)
        if not self.force and self._up_to_date(stage):
            log.info("%s: up to date", stage)
            return "skipped"
        self._check_own(stage)
        self.out.mkdir(parents=True, exist_ok=True)
        artifacts = getattr(self, f"_stage_{stage}")()
        self._record(stage, artifacts)
        log.info("%s: wrote %s", stage, ", ".join(artifacts))
        return "done"

    def run(self, stages=STAGES) -> dict:
        return {s: self.run_stage(s) for s in stages}

    # -- stage: regions --------------------------------------------------------------

    def _regions_for(self, sample) -> list[dict]:
        c = self.cfg
        rel = None
        out = []
        for b in c.backends:
            m, _ = c.caption_grid(b)
            if c.caption_method == "generic":
                full = tuple(range(self.ite.n_patches))
                rs = RegionSet(regions=[full], seed=0, K=len(full), m=1, n_patches=len(full))
                stats = None
            else:
                if sample.image_missing:
                    raise StageError(f"image missing for sample {sample.sample_id}: {sample.image_ref}")
                if rel is None:
                    try:
                        rel = compute_relevance(self.ite, sample.image_ref, sample.question, c.ite.layer, c.ite.clamp_mode)
                    except Exception as exc:
                        raise StageError(f"relevance failed for sample {sample.sample_id}: {exc}") from exc
                rs = sample_regions(rel, b.resolved_K(), m, derive_seed("regions", c.seed, sample.sample_id))
                stats = rel.stats()
            out.append({
                "sample_id": sample.sample_id, "backend_id": b.backend_id, **rs.to_dict(),
                "layer": c.ite.layer, "clamp_mode": c.ite.clamp_mode, "relevance": stats,
                "config_hash": self.hashes["regions"],
            })
        return out

    def _stage_regions(self):
        rows = [r for rs in self._map(self._regions_for, self.all_samples()) for r in rs]
        write_artifact("regions", rows, self.out / "regions.jsonl")
        return ["regions.jsonl"]

    # -- stage: captions -------------------------------------------------------------

    def _prompts(self, sample, bcfg):
        if self.cfg.caption_method == "default":
            return render_prompts(sample.question, style=bcfg.style, n=bcfg.n_prompts)
        return [auxiliary_prompt("generic_caption")]

    def _stage_captions(self):
        regions = {(r["sample_id"], r["backend_id"]): RegionSet.from_dict(r) for r in read_artifact(self.out / "regions.jsonl")}
        samples = self.all_samples()
        rows, zs_rows = [], []
        eval_ids = {s.sample_id for s in self.samples["eval"]}
        for bcfg, backend in zip(self.cfg.backends, self.backends):
            params = bcfg.decoding_params(self.cfg.profile)
            cache = CaptionCache(self.out / "cache" / f"captions-{bcfg.backend_id}.jsonl")

            def one(sample):
                cs = generate_captions(sample, regions[(sample.sample_id, bcfg.backend_id)], self._prompts(sample, bcfg),
                                       backend, params, cache)
                for ri, tid, attempts, msg in cs.errors:
                    log.warning("sample %s region %d template %d needed %d attempts (%s)", sample.sample_id, ri, tid, attempts, msg)
                zs = self._zero_shot(sample, bcfg, backend, cache) if sample.sample_id in eval_ids else None
                return cs, zs

            for cs, zs in self._map(one, samples):
                rows.extend(rec.to_line(cs.sample_id) | {"config_hash": self.hashes["captions"]} for rec in cs.captions)
                if zs is not None:
                    zs_rows.append(zs)
            cache.flush()
        write_artifact("captions", rows, self.out / "captions.jsonl")
        write_artifact("zeroshot", zs_rows, self.out / "zeroshot.jsonl")
        return ["captions.jsonl", "zeroshot.jsonl"]

    def _zero_shot(self, sample, bcfg, backend, cache):
        params = bcfg.decoding_params(self.cfg.profile)
        prompt = auxiliary_prompt("zero_shot", bcfg.style).replace("{question}", sample.question)
        try:
            checksum = image_key(sample.image_ref)
        except FileNotFoundError:
            checksum = f"missing:{sample.image_ref}"
        key = CaptionCache.key(backend.backend_id, checksum, sample.question, [], "zero_shot", params.params_hash())
        answer = cache.get(key)
        if answer is None:
            answer = backend.answer(sample.image_ref, sample.question, params, sample_id=sample.sample_id, prompt=prompt)
            cache.put(key, answer)
        return {"sample_id": sample.sample_id, "backend_id": backend.backend_id, "answer": answer, "prompt": prompt,
                "config_hash": self.hashes["captions"]}

    def caption_sets(self) -> dict[str, CaptionSet]:
        """Sample id -> merged caption set, per the configured budgets."""
        per = {}
        for r in read_artifact(self.out / "captions.jsonl"):
            per.setdefault(r["sample_id"], {}).setdefault(r["backend_id"], CaptionSet(r["sample_id"])).captions.append(
                CaptionRecord.from_line(r))
        budgets = self.cfg.budgets()
        order = [b.backend_id for b in self.cfg.backends]
        return {sid: merge_caption_sets([by_b[b] for b in order], budgets) for sid, by_b in per.items()}

    # -- stage: exemplars ------------------------------------------------------------

    def _stage_exemplars(self):
        caps = {sid: cs.texts() for sid, cs in self.caption_sets().items()}
        index = ExemplarIndex(strategy=self.cfg.exemplars.strategy, embedder=self.ite, seed=self.cfg.seed,
                              embedder_id=getattr(self.ite, "backend_id", None))
        index.fit(self.samples["train"], captions=caps)
        if index.missing_captions_:
            log.warning("%d training samples have no captions: %s", len(index.missing_captions_), index.missing_captions_[:10])
        N = self.cfg.exemplar_N()
        h = self.hashes["exemplars"]
        write_artifact("exemplars", [r | {"config_hash": h} for r in index.to_records()], self.out / "exemplars.jsonl")
        neighbors = self._map(lambda s: {"sample_id": s.sample_id, "neighbors": [e.sample_id for e in index.select_similar(s, N)],
                                         "config_hash": h}, self.all_samples())
        write_artifact("neighbors", neighbors, self.out / "neighbors.jsonl")
        return ["exemplars.jsonl", "neighbors.jsonl"]

    # -- reader inputs -------------------------------------------------------------

    def _visual(self, sample):
        enc = self.visual_encoder
        if enc is None:
            return None
        if sample.sample_id not in self._visual_cache:
            self._visual_cache[sample.sample_id] = enc.encode(sample.image_ref).values
        return self._visual_cache[sample.sample_id]

    def reader_inputs(self, samples) -> list[ReaderInput]:
        caps = self.caption_sets()
        neighbors = {r["sample_id"]: r["neighbors"] for r in read_artifact(self.out / "neighbors.jsonl")}
        train = {s.sample_id: s for s in self.samples["train"]}
        out = []
        for s in samples:
            if s.sample_id not in caps:
                raise ArtifactError(f"no captions for sample {s.sample_id}; rerun `gerea captions`")
            exemplars = [Exemplar(n, train[n].question, train[n].answer, caps[n].texts() if n in caps else [])
                         for n in neighbors.get(s.sample_id, [])]
            out.append(ReaderInput(s.sample_id, s.question, caps[s.sample_id].texts(), exemplars, self._visual(s)))
        return out

    def _reader(self, seed) -> FiDReader:
        return FiDReader(**self.cfg.reader_params(), seed=seed, cache_dir=checkpoint_cache_dir())

    # -- stage: train ----------------------------------------------------------------

    def _ckpt(self, seed) -> Path:
        return self.out / "checkpoints" / f"seed{seed}"

    def _stage_train(self):
        train = self.samples["train"]
        X = self.reader_inputs(train)
        y = [s.answer for s in train]
        dev = None
        if "dev" in self.samples and self.samples["dev"]:
            dev_s = self.samples["dev"]
            dev = (self.reader_inputs(dev_s), [list(s.human_answers) for s in dev_s])
        artifacts = []
        for seed in self.cfg.seeds:
            d = self._ckpt(seed)
            done = d / "DONE"
            if not self.force and done.is_file() and done.read_text().strip() == self.hashes["train"]:
                log.info("train: seed %d already trained", seed)
            else:
                reader = self._reader(seed).fit(X, y, dev=dev)
                reader.save(d)
                write_json(reader.train_log_.to_dict(), d / "train_log.json")
                done.write_text(self.hashes["train"] + "\n")
            artifacts += [str((d / f).relative_to(self.out)) for f in ("config.json", "weights.safetensors", "tokenizer.json", "train_log.json")]
        return artifacts

    # -- stage: predict / ensemble -----------------------------------------------------

    def _stage_predict(self):
        samples = self.samples["eval"]
        X = self.reader_inputs(samples)
        h = self.hashes["predict"]
        artifacts = []
        for seed in self.cfg.seeds:
            reader = FiDReader.load(self._ckpt(seed), cache_dir=self._reader(seed).cache_dir)
            answers = reader.predict(X)
            rows = []
            for s, a in zip(samples, answers):
                row = {"sample_id": s.sample_id, "answer": a, "seed": seed, "config_hash": h}
                if s.mc_options:
                    row["mc_choice"] = select_mc_option(a, s.mc_options)
                rows.append(row)
            name = f"predictions_seed{seed}.jsonl"
            write_artifact("predictions", rows, self.out / name)
            artifacts.append(name)
        self._write_vote()
        return artifacts + ["predictions.jsonl"]

    def _write_vote(self):
        per_seed = []
        for seed in self.cfg.seeds:
            path = self.out / f"predictions_seed{seed}.jsonl"
            if not path.is_file():
                raise StageError(f"{path.name} missing; run `gerea predict`")
            per_seed.append({r["sample_id"]: r["answer"] for r in read_artifact(path)})
        mc = {s.sample_id: s.mc_options for s in self.samples["eval"]}
        rows = []
        for sid in sorted(per_seed[0]):
            answers = [p[sid] for p in per_seed]
            row = {"sample_id": sid, "answer": ensemble_vote(answers), "seed_answers": answers,
                   "votes": vote_counts(answers), "config_hash": self.hashes["predict"],
                   "passage_template": passage_template_hash()}
            if mc.get(sid):
                row["mc_choice"] = select_mc_option(row["answer"], mc[sid])
            rows.append(row)
        write_artifact("predictions", rows, self.out / "predictions.jsonl")

    def _stage_ensemble(self):
        self._write_vote()
        return ["predictions.jsonl"]

    # -- stage: evaluate / analyze -----------------------------------------------------

    def _eval_inputs(self):
        samples = self.samples["eval"]
        missing = [s.sample_id for s in samples if not s.human_answers]
        if missing:
            raise StageError(f"eval split has samples without answers ({missing[:5]}); cannot score")
        preds = {r["sample_id"]: r["answer"] for r in read_artifact(self.out / "predictions.jsonl")}
        primary = self.cfg.backends[0].backend_id
        zs = {r["sample_id"]: r["answer"] for r in read_artifact(self.out / "zeroshot.jsonl") if r["backend_id"] == primary}
        caps = self.caption_sets()
        gold = {s.sample_id: list(s.human_answers) for s in samples}
        return samples, preds, zs, caps, gold

    def _stage_evaluate(self):
        samples, preds, zs, caps, gold = self._eval_inputs()
        ids = [s.sample_id for s in samples]
        mc = {s.sample_id: (s.mc_options, s.mc_correct_index) for s in samples if s.mc_options}
        report = evaluate(
            preds, gold,
            categories={s.sample_id: s.category for s in samples} if self.cfg.dataset.name == "okvqa" else None,
            captions={i: caps[i].texts() for i in ids},
            answers={s.sample_id: s.answer for s in samples},
            backend_preds={i: zs[i] for i in ids},
            mc=mc or None,
            config_hashes={k: self.hashes[k] for k in STAGES[:-2]},
        )
        d = report.to_dict() | {"schema_version": SCHEMA_VERSION, "dataset": self.cfg.dataset.name,
                                "answer_field": self.cfg.dataset.answer_field, "backend_id": self.cfg.backends[0].backend_id,
                                "clamp_mode": self.cfg.ite.clamp_mode, "config_hash": self.hashes["evaluate"]}
        write_json(d, self.out / "report.json")
        (self.out / "report_table.txt").write_text(render_category_table(d), encoding="utf-8")
        return ["report.json", "report_table.txt"]

    def _stage_analyze(self):
        samples, preds, zs, caps, gold = self._eval_inputs()
        ids = [s.sample_id for s in samples]
        answers = {s.sample_id: s.answer for s in samples}
        beh = behavior_analysis({i: preds[i] for i in ids}, {i: zs[i] for i in ids}, gold)
        per_backend = {}
        for r in read_artifact(self.out / "captions.jsonl"):
            if r["sample_id"] in answers:
                per_backend.setdefault(r["backend_id"], {}).setdefault(r["sample_id"], []).append(r)
        curves = {}
        for bcfg in self.cfg.backends:
            recs = per_backend.get(bcfg.backend_id, {})
            m, n = self.cfg.caption_grid(bcfg)

            def curve(keep, upto):
                pts = []
                for k in range(1, upto + 1):
                    sub = {sid: [r["caption"] for r in rs if keep(r, k)] for sid, rs in recs.items()}
                    pts.append({"k": k, "ahr": answer_hit_rate(sub, answers), "anr": answer_noise_rate(sub, answers)})
                return pts

            curves[bcfg.backend_id] = {
                "n_prompts": curve(lambda r, k: r["template_id"] <= k, n),
                "m_regions": curve(lambda r, k: r["region_index"] < k, m),
            }
        out = {"schema_version": SCHEMA_VERSION, "behavior": asdict(beh), "caption_curves": curves,
               "config_hash": self.hashes["analyze"]}
        write_json(out, self.out / "analysis.json")
        return ["analysis.json"]
