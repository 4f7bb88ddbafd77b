"""Experiment orchestration.

An experiment is a set of independent systems, one per (feature, warp factor).
Each system runs the same chain of stages::

    [train network -> fit PCA -> extract BN]    bottleneck features only
    train UBM -> [train T -> train PLDA]        i-vector backend only
    enroll -> score

MFCC extraction runs once per utterance for all warp factors, then per-feature
and cross-feature fusion and evaluation close the run. Every stage writes a
stamp holding a hash of the settings that produced its outputs; the stage is
skipped when the stamp matches and the outputs are newer than the inputs.

Artifacts live under ``<output>/<feature>/aXXX/{features,models,scores}`` with
the warp factor in integer hundredths, e.g. ``a092``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np

from . import corpus, evaluation, gmm, ivector, neural, storage
from .config import ExperimentConfig
from .errors import ConfigError, DataError, NumericError, VsvError
from .frontend import FeatureMatrix, alpha_code, extract_grid

log = logging.getLogger(__name__)

BN_FEATURES = ("spk-bn", "apc-bn")
SYSTEM_STAGES = ("train-spkbn", "train-apc", "fit-pca", "extract-bn", "train-ubm",
                 "train-tv", "train-plda", "enroll", "score")


def alpha_dir(alpha: float) -> str:
    return f"a{alpha_code(alpha):03d}"


class Layout:
    """Where every artifact of an experiment lives."""

    def __init__(self, cfg: ExperimentConfig):
        self.corpus = Path(cfg.corpus_dir)
        self.out = Path(cfg.output_dir)

    manifest = property(lambda self: self.corpus / "manifest.txt")
    background = property(lambda self: self.corpus / "background.txt")
    enrollment = property(lambda self: self.corpus / "enrollment.txt")
    trials = property(lambda self: self.corpus / "trials.txt")
    corpus_info = property(lambda self: self.corpus / "corpus.json")
    reports = property(lambda self: self.out / "reports")
    report_table = property(lambda self: self.out / "report.txt")

    def system(self, feature: str, alpha: float) -> Path:
        return self.out / feature / alpha_dir(alpha)

    def features(self, feature: str, alpha: float, part: str) -> Path:
        return self.system(feature, alpha) / "features" / f"{part}.vsva"

    def model(self, feature: str, alpha: float, name: str) -> Path:
        return self.system(feature, alpha) / "models" / name

    def scores(self, feature: str, alpha: float) -> Path:
        return self.system(feature, alpha) / "scores" / f"{feature}_{alpha_dir(alpha)}.scores"

    def stamp(self, feature: str, alpha: float | None, stage: str) -> Path:
        base = self.out / feature / alpha_dir(alpha) if alpha is not None else self.out / feature
        return base / ".stamps" / f"{stage}.stamp"

    def fused(self, feature: str | None = None) -> Path:
        return self.out / "fused" / (f"{feature}_all.scores" if feature else "all.scores")


@dataclass(frozen=True)
class Event:
    stage: str
    feature: str
    alpha: float | None
    status: str  # "ran" or "skipped"

    def __str__(self):
        where = self.feature + (f" {alpha_dir(self.alpha)}" if self.alpha is not None else "")
        return f"{self.status:<7s} {self.stage:<12s} {where}"


def _pool_map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def _fresh(outputs, inputs, stamp: Path, key: str) -> bool:
    try:
        if stamp.read_text() != key:
            return False
        out_t = min(p.stat().st_mtime_ns for p in outputs)
        in_t = max((p.stat().st_mtime_ns for p in inputs), default=0)
    except FileNotFoundError:
        return False
    return out_t >= in_t


def _run_stage(events, force, stage, feature, alpha, outputs, inputs, stamp, key, fn):
    if not force and _fresh(outputs, inputs, stamp, key):
        events.append(Event(stage, feature, alpha, "skipped"))
        return
    where = f"{feature}" + (f" alpha={alpha:.2f}" if alpha is not None else "")
    try:
        missing = [p for p in inputs if not p.exists()]
        if missing:
            raise DataError(f"missing input {missing[0]}")
        fn()
    except VsvError as exc:
        raise type(exc)(f"stage {stage} failed for {where}: {exc}") from exc
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        raise NumericError(f"stage {stage} failed for {where}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"stage {stage} failed for {where}: {exc}") from exc
    stamp.parent.mkdir(parents=True, exist_ok=True)
    stamp.write_text(key)
    events.append(Event(stage, feature, alpha, "ran"))


# ---------------------------------------------------------------------------
# corpus synthesis


@dataclass(frozen=True)
class SynthJob:
    path: str  # relative to the corpus root
    speaker_id: str
    phrase_id: str
    session: int
    speaker: corpus.SpeakerSpec
    template: corpus.PhraseTemplate
    seed: int


def _ids(prefix: str, n: int):
    width = max(2, len(str(n - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def plan_corpus(cfg: ExperimentConfig):
    """Deterministic list of (evaluation jobs, background jobs) for the seed.

    Background speakers read their own phrase set; every recording draws its
    own session perturbation of speaker and phrase."""
    cc = cfg.corpus
    rng = np.random.default_rng(cfg.seed)
    phrases = [corpus.random_phrase(p, rng, cc.phrase_ms) for p in _ids("p", cc.phrases)]
    bg_phrases = [corpus.random_phrase(p, rng, cc.phrase_ms) for p in _ids("q", cc.background_phrases)]
    vtl = (cc.vtl_min, cc.vtl_max)
    speakers = [corpus.random_speaker(rng, vtl, cc.idiosyncrasy) for _ in range(cc.speakers)]
    bg_speakers = [corpus.random_speaker(rng, vtl, cc.idiosyncrasy) for _ in range(cc.background_speakers)]

    def jobs(folder, ids, specs, templates, sessions):
        out = []
        for sid, spec in zip(ids, specs):
            for tpl in templates:
                for k in range(sessions):
                    uid = f"{sid}_{tpl.phrase_id}_{k}"
                    out.append(SynthJob(f"{folder}/{uid}.wav", sid, tpl.phrase_id, k, spec, tpl,
                                        int(rng.integers(2 ** 31))))
        return out

    background = jobs("background", _ids("b", cc.background_speakers), bg_speakers, bg_phrases,
                      cc.background_sessions)
    evaluation_jobs = jobs("wav", _ids("s", cc.speakers), speakers, phrases, cc.sessions)
    return evaluation_jobs, background


def _render(job: SynthJob, root: Path) -> None:
    rng = np.random.default_rng(job.seed)
    spec, tpl = corpus.session_variant(job.speaker, job.template, rng)
    utt = corpus.synth_utterance(spec, tpl, int(rng.integers(2 ** 31)), session_id=str(job.session),
                                 speaker_id=job.speaker_id)
    corpus.write_wav(root / job.path, utt.samples)


def _render_chunk(jobs, root):
    for job in jobs:
        _render(job, root)


def _chunks(items, n):
    items = list(items)
    size = max(1, -(-len(items) // max(n, 1)))
    return [items[i:i + size] for i in range(0, len(items), size)]


def synth_corpus(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Render the synthetic corpus plus manifest, background, enrollment and trial lists."""
    lay = Layout(cfg)
    root = lay.corpus
    if root.exists() and any(root.iterdir()) and not force:
        raise DataError(f"corpus directory {root} is not empty; pass --force to overwrite")
    try:
        root.mkdir(parents=True, exist_ok=True)
        for sub in ("wav", "background"):
            if (root / sub).exists():
                shutil.rmtree(root / sub)
            (root / sub).mkdir()
    except OSError as exc:
        raise DataError(f"cannot write corpus directory {root}: {exc.strerror}") from exc
    eval_jobs, bg_jobs = plan_corpus(cfg)
    _pool_map(partial(_render_chunk, root=root), _chunks(eval_jobs + bg_jobs, 4 * cfg.workers),
              cfg.workers)
    manifest = [corpus.ManifestEntry(Path(j.path).stem, j.speaker_id, j.phrase_id, j.path)
                for j in eval_jobs]
    background = [corpus.ManifestEntry(Path(j.path).stem, j.speaker_id, j.phrase_id, j.path)
                  for j in bg_jobs]
    n_enroll = cfg.corpus.enroll_sessions
    models = []
    for e in manifest:
        if e.utterance_id.endswith("_0"):
            ids = tuple(f"{e.speaker_id}_{e.phrase_id}_{k}" for k in range(n_enroll))
            models.append(corpus.EnrollmentModel(f"{e.speaker_id}_{e.phrase_id}", e.speaker_id,
                                                 e.phrase_id, ids))
    trials = corpus.build_trials(manifest, models)
    corpus.write_manifest(lay.manifest, manifest)
    corpus.write_manifest(lay.background, background)
    corpus.write_enrollment(lay.enrollment, models)
    corpus.write_trials(lay.trials, trials)
    info = {"seed": cfg.seed, "corpus": dataclasses.asdict(cfg.corpus),
            "evaluation_utterances": len(manifest), "background_utterances": len(background),
            "models": len(models), "trials": trials.counts()}
    lay.corpus_info.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info


def corpus_ready(cfg: ExperimentConfig) -> bool:
    lay = Layout(cfg)
    return all(p.exists() for p in (lay.manifest, lay.background, lay.enrollment, lay.trials))


# ---------------------------------------------------------------------------
# MFCC extraction (all warp factors per utterance)


def _load_lists(lay: Layout):
    for p in (lay.manifest, lay.background):
        if not p.exists():
            raise DataError(f"missing corpus list {p}; run synth-corpus first or provide one")
    return corpus.read_manifest(lay.manifest), corpus.read_manifest(lay.background)


def _extract_chunk(entries, root: Path, alphas, frontend):
    out = {a: [] for a in alphas}
    for uid, rel in entries:
        utt = dataclasses.replace(corpus.read_wav(root / rel), utterance_id=uid)
        grid = extract_grid(utt, frontend, alphas)
        for a in alphas:
            out[a].append((grid[a].values.astype(np.float32), uid, a))
    return out


def extract_mfcc(cfg: ExperimentConfig, force: bool = False) -> list:
    lay = Layout(cfg)
    manifest, background = _load_lists(lay)
    parts = {"background": background, "eval": manifest}
    inputs = [lay.manifest, lay.background] + [lay.corpus / e.path for e in background + manifest]
    events, stale = [], []
    for a in cfg.alphas:
        outputs = [lay.features("mfcc", a, p) for p in parts]
        key = cfg.digest("extract-mfcc", cfg.frontend, a)
        if not force and _fresh(outputs, inputs, lay.stamp("mfcc", a, "extract"), key):
            events.append(Event("extract", "mfcc", a, "skipped"))
        else:
            stale.append(a)
    if not stale:
        return events
    missing = [p for p in inputs if not p.exists()]
    if missing:
        raise DataError(f"stage extract failed for mfcc: missing input {missing[0]}")
    items = [(part, e.utterance_id, e.path) for part, entries in parts.items() for e in entries]
    chunks = _chunks(items, 4 * cfg.workers)
    fn = partial(_extract_chunk, root=lay.corpus, alphas=tuple(stale), frontend=cfg.frontend)
    try:
        results = _pool_map(fn, [[(uid, rel) for _, uid, rel in c] for c in chunks], cfg.workers)
    except VsvError as exc:
        raise type(exc)(f"stage extract failed for mfcc: {exc}") from exc
    for a in stale:
        records = [r for res in results for r in res[a]]
        by_part = {p: [] for p in parts}
        for (part, _, _), rec in zip(items, records):
            by_part[part].append(rec)
        for part, recs in by_part.items():
            storage.save_feature_archive(lay.features("mfcc", a, part), recs)
        stamp = lay.stamp("mfcc", a, "extract")
        stamp.parent.mkdir(parents=True, exist_ok=True)
        stamp.write_text(cfg.digest("extract-mfcc", cfg.frontend, a))
        events.append(Event("extract", "mfcc", a, "ran"))
    return events


# ---------------------------------------------------------------------------
# per-system stages


def load_archive(path) -> list:
    return [FeatureMatrix(v, uid, a) for v, uid, a in storage.load_feature_archive(path)]


def system_stages(cfg: ExperimentConfig, feature: str) -> list:
    stages = []
    if feature == "spk-bn":
        stages += ["train-spkbn", "fit-pca", "extract-bn"]
    elif feature == "apc-bn":
        stages += ["train-apc", "fit-pca", "extract-bn"]
    stages.append("train-ubm")
    if cfg.backend == "ivector":
        stages += ["train-tv", "train-plda"]
    return stages + ["enroll", "score"]


class _System:
    """One (feature, alpha) system; each method is a stage."""

    def __init__(self, cfg: ExperimentConfig, feature: str, alpha: float, force: bool, events: list):
        self.cfg, self.feature, self.alpha = cfg, feature, alpha
        self.force, self.events = force, events
        self.lay = Layout(cfg)
        self.seed = cfg.seed * 1000 + alpha_code(alpha)

    def feat(self, part):
        return self.lay.features(self.feature, self.alpha, part)

    def mfcc(self, part):
        return self.lay.features("mfcc", self.alpha, part)

    def model(self, name):
        return self.lay.model(self.feature, self.alpha, name)

    def stage(self, name, outputs, inputs, key_parts, fn):
        key = self.cfg.digest(name, self.seed, *key_parts)
        _run_stage(self.events, self.force, name, self.feature, self.alpha, outputs, inputs,
                   self.lay.stamp(self.feature, self.alpha, name), key, fn)

    # -- bottleneck networks

    def train_network(self):
        name = "train-spkbn" if self.feature == "spk-bn" else "train-apc"
        tcfg = self.cfg.network.train_config(self.seed)

        def run():
            feats = load_archive(self.mfcc("background"))
            if self.feature == "spk-bn":
                speaker = {e.utterance_id: e.speaker_id for e in corpus.read_manifest(self.lay.background)}
                net = neural.train_spk_bn(feats, [speaker[f.utterance_id] for f in feats], tcfg)
            else:
                net = neural.train_apc(feats, tcfg)
            neural.save_network(self.model("network.vsvn"), net, tcfg)

        self.stage(name, [self.model("network.vsvn")], [self.mfcc("background"), self.lay.background],
                   [self.feature, self.cfg.network], run)

    def _tap(self):
        net = self.cfg.network
        return net.spk_tap if self.feature == "spk-bn" else net.apc_tap

    def fit_pca(self):
        def run():
            net = neural.load_network(self.model("network.vsvn"))
            acts = [neural.tap_activations(f.values.T, net, self._tap(), self.cfg.network.context)
                    for f in load_archive(self.mfcc("background"))]
            neural.save_pca(self.model("pca.vsvn"), neural.fit_pca(np.vstack(acts), self.cfg.network.pca_dim))

        self.stage("fit-pca", [self.model("pca.vsvn")],
                   [self.model("network.vsvn"), self.mfcc("background")],
                   [self._tap(), self.cfg.network.pca_dim], run)

    def extract_bn(self):
        def run():
            net = neural.load_network(self.model("network.vsvn"))
            pca = neural.load_pca(self.model("pca.vsvn"))
            for part in ("background", "eval"):
                out = [neural.extract_bn(f, net, self._tap(), pca, self.cfg.network.context)
                       for f in load_archive(self.mfcc(part))]
                storage.save_feature_archive(self.feat(part), [(f.values, f.utterance_id, self.alpha)
                                                               for f in out])

        self.stage("extract-bn", [self.feat("background"), self.feat("eval")],
                   [self.model("network.vsvn"), self.model("pca.vsvn"), self.mfcc("background"),
                    self.mfcc("eval")], [self._tap()], run)

    # -- backends

    def train_ubm(self):
        g = self.cfg.gmm

        def run():
            ubm = gmm.train_ubm_em(load_archive(self.feat("background")), g.components,
                                   g.em_iterations, seed=self.seed, subsample=g.subsample)
            ubm.save(self.model("ubm.vsvg"))

        self.stage("train-ubm", [self.model("ubm.vsvg")], [self.feat("background")],
                   [g.components, g.em_iterations, g.subsample], run)

    def _stats(self, feats, ubm):
        return [ivector.accumulate_stats(f, ubm) for f in feats]

    def train_tv(self):
        iv = self.cfg.ivector

        def run():
            ubm = gmm.DiagonalGmm.load(self.model("ubm.vsvg"))
            stats = self._stats(load_archive(self.feat("background")), ubm)
            tv = ivector.train_tmatrix(stats, ubm, iv.rank, iv.tv_iterations, seed=self.seed)
            tv.save(self.model("tv.vsvt"))

        self.stage("train-tv", [self.model("tv.vsvt")], [self.model("ubm.vsvg"), self.feat("background")],
                   [iv.rank, iv.tv_iterations], run)

    def _ivectors(self, feats):
        ubm = gmm.DiagonalGmm.load(self.model("ubm.vsvg"))
        tv = ivector.TotalVariabilityModel.load(self.model("tv.vsvt"))
        return np.array([ivector.extract_ivector(s, tv) for s in self._stats(feats, ubm)])

    def train_plda(self):
        iv = self.cfg.ivector

        def run():
            feats = load_archive(self.feat("background"))
            x = self._ivectors(feats)
            entry = {e.utterance_id: e for e in corpus.read_manifest(self.lay.background)}
            # each (speaker, phrase) pair is its own class
            labels = [f"{entry[f.utterance_id].speaker_id}/{entry[f.utterance_id].phrase_id}" for f in feats]
            normed, norm = ivector.spherical_norm(x, x, iv.norm_iterations)
            plda = ivector.train_plda(normed, labels, iv.plda_iterations)
            norm.save(self.model("norm.vsvp"))
            plda.save(self.model("plda.vsvp"))

        self.stage("train-plda", [self.model("norm.vsvp"), self.model("plda.vsvp")],
                   [self.model("ubm.vsvg"), self.model("tv.vsvt"), self.feat("background"),
                    self.lay.background], [iv.norm_iterations, iv.plda_iterations], run)

    def _backend_inputs(self):
        names = ["ubm.vsvg"]
        if self.cfg.backend == "ivector":
            names += ["tv.vsvt", "norm.vsvp", "plda.vsvp"]
        return [self.model(n) for n in names]

    def enroll(self):
        g = self.cfg.gmm

        def run():
            models = corpus.read_enrollment(self.lay.enrollment)
            feats = {f.utterance_id: f for f in load_archive(self.feat("eval"))}
            ids = [m.model_id for m in models]
            for m in models:
                missing = [u for u in m.utterance_ids if u not in feats]
                if missing:
                    raise DataError(f"model {m.model_id}: no features for {missing[0]}")
            if self.cfg.backend == "gmm-ubm":
                ubm = gmm.DiagonalGmm.load(self.model("ubm.vsvg"))
                mcfg = gmm.MapConfig(g.relevance_factor, g.map_iterations)
                means = np.array([gmm.map_adapt(ubm, [feats[u] for u in m.utterance_ids], mcfg).means
                                  for m in models])
                arrays = {"means": means}
            else:
                norm = ivector.SphericalNorm.load(self.model("norm.vsvp"))
                vecs = [ivector.enroll_speaker(norm.apply(self._ivectors([feats[u] for u in m.utterance_ids])))
                        for m in models]
                arrays = {"vectors": np.array(vecs)}
            storage.save_arrays(self.model("enrolled.vsve"), b"VSVE", arrays,
                                {"kind": self.cfg.backend, "models": ids})

        self.stage("enroll", [self.model("enrolled.vsve")],
                   self._backend_inputs() + [self.feat("eval"), self.lay.enrollment],
                   [self.cfg.backend, g.relevance_factor, g.map_iterations], run)

    def score(self):
        def run():
            manifest = corpus.read_manifest(self.lay.manifest)
            models = corpus.read_enrollment(self.lay.enrollment)
            trials = corpus.read_trials(self.lay.trials, manifest, models)
            arrays, meta = storage.load_arrays(self.model("enrolled.vsve"), b"VSVE")
            model_index = {m: i for i, m in enumerate(meta["models"])}
            feats = {f.utterance_id: f for f in load_archive(self.feat("eval"))}
            tests = sorted({t.test_id for t in trials})
            missing = [u for u in tests if u not in feats]
            if missing:
                raise DataError(f"no features for test utterance {missing[0]}")
            if self.cfg.backend == "gmm-ubm":
                ubm = gmm.DiagonalGmm.load(self.model("ubm.vsvg"))
                table = {u: gmm.score_llr_many(feats[u], arrays["means"], ubm) for u in tests}
            else:
                norm = ivector.SphericalNorm.load(self.model("norm.vsvp"))
                plda = ivector.PldaModel.load(self.model("plda.vsvp"))
                test_vecs = norm.apply(self._ivectors([feats[u] for u in tests]))
                llr = plda.score_many(arrays["vectors"], test_vecs)
                table = {u: llr[:, j] for j, u in enumerate(tests)}
            scores = [float(table[t.test_id][model_index[t.model_id]]) for t in trials]
            sset = evaluation.ScoreSet(trials.keys(), scores, f"{self.feature}/{alpha_dir(self.alpha)}",
                                       [t.trial_type for t in trials])
            evaluation.write_scores(self.lay.scores(self.feature, self.alpha), sset)

        self.stage("score", [self.lay.scores(self.feature, self.alpha)],
                   self._backend_inputs() + [self.model("enrolled.vsve"), self.feat("eval"),
                                             self.lay.trials, self.lay.manifest, self.lay.enrollment],
                   [self.cfg.backend], run)

    def run(self, stages=None):
        table = {"train-spkbn": self.train_network, "train-apc": self.train_network,
                 "fit-pca": self.fit_pca, "extract-bn": self.extract_bn, "train-ubm": self.train_ubm,
                 "train-tv": self.train_tv, "train-plda": self.train_plda, "enroll": self.enroll,
                 "score": self.score}
        for name in system_stages(self.cfg, self.feature):
            if stages is None or name in stages:
                table[name]()


def _system_task(task, cfg, stages, force):
    feature, alpha = task
    events = []
    _System(cfg, feature, alpha, force, events).run(stages)
    return events


def run_systems(cfg: ExperimentConfig, stages=None, force: bool = False) -> list:
    """Run the per-(feature, alpha) stage chains, optionally restricted to `stages`."""
    if stages is not None:
        stages = set(stages)
        unknown = stages - set(SYSTEM_STAGES)
        if unknown:
            raise ConfigError(f"unknown stage(s) {sorted(unknown)}")
        applicable = {s for f in cfg.features for s in system_stages(cfg, f)}
        if not stages & applicable:
            raise ConfigError(f"stage {', '.join(sorted(stages))} does not apply to features "
                              f"{list(cfg.features)} with backend {cfg.backend}")
    tasks = [(f, a) for f in cfg.features for a in cfg.alphas]
    fn = partial(_system_task, cfg=cfg, stages=stages, force=force)
    return [e for events in _pool_map(fn, tasks, cfg.workers) for e in events]


# ---------------------------------------------------------------------------
# fusion and evaluation


def fuse_files(paths, output, system_id: str = "fused") -> evaluation.ScoreSet:
    sets = [evaluation.read_scores(p) for p in paths]
    fused = evaluation.fuse_scores(sets, system_id)
    evaluation.write_scores(output, fused)
    return fused


def fuse(cfg: ExperimentConfig, force: bool = False) -> list:
    lay = Layout(cfg)
    events = []
    groups = [(f, [lay.scores(f, a) for a in cfg.alphas], lay.fused(f)) for f in cfg.features]
    if len(cfg.features) > 1:
        groups.append(("all", [p for _, paths, _ in groups for p in paths], lay.fused()))
    for name, paths, out in groups:
        _run_stage(events, force, "fuse", name, None, [out], paths, lay.stamp("fused", None, name),
                   cfg.digest("fuse", [str(p) for p in paths]),
                   partial(fuse_files, paths, out, f"{name}/fused"))
    return events


def report_systems(cfg: ExperimentConfig):
    """(label, score file) for every system in report order."""
    lay = Layout(cfg)
    rows = []
    for f in cfg.features:
        rows += [(f"{f} a={a:.2f}", lay.scores(f, a)) for a in cfg.alphas]
        rows.append((f"{f} (all alpha)", lay.fused(f)))
    if len(cfg.features) > 1:
        rows.append(("+".join(cfg.features) + " (all alpha)", lay.fused()))
    return rows


def evaluate_file(path, label: str | None = None, dcf=evaluation.DcfConfig()) -> evaluation.Report:
    scores = evaluation.read_scores(path, label)
    return evaluation.evaluate_trials(scores, evaluation.trials_from_scores(scores), dcf)


def write_reports(cfg: ExperimentConfig) -> None:
    lay = Layout(cfg)
    lay.reports.mkdir(parents=True, exist_ok=True)
    lines = [evaluation.TABLE_HEADER]
    for label, path in report_systems(cfg):
        rep = evaluate_file(path, label, cfg.dcf)
        (lay.reports / f"{path.stem}.txt").write_text(rep.as_text())
        lines.append(rep.table_row())
        if "all alpha" in label or label.endswith("a=1.00"):
            scores = evaluation.read_scores(path)
            kinds = np.array(scores.trial_types)
            gen = scores.scores[kinds == "genuine"]
            for kind in corpus.NONTARGET_TYPES:
                imp = scores.scores[kinds == kind]
                if gen.size and imp.size:
                    evaluation.write_det(lay.reports / f"{path.stem}.{kind}.det.csv", gen, imp)
    lay.report_table.write_text("\n".join(lines) + "\n")


def evaluate(cfg: ExperimentConfig, force: bool = False) -> list:
    lay = Layout(cfg)
    events = []
    inputs = [p for _, p in report_systems(cfg)]
    _run_stage(events, force, "evaluate", "report", None, [lay.report_table], inputs,
               lay.stamp("reports", None, "evaluate"), cfg.digest("evaluate", cfg.dcf,
                                                                  [str(p) for p in inputs]),
               partial(write_reports, cfg))
    return events


def run_experiment(cfg: ExperimentConfig, force: bool = False) -> list:
    """The whole DAG. The corpus is synthesized only when it does not exist yet."""
    events = []
    if corpus_ready(cfg):
        events.append(Event("synth-corpus", "corpus", None, "skipped"))
    else:
        synth_corpus(cfg, force=force)
        events.append(Event("synth-corpus", "corpus", None, "ran"))
    events += extract_mfcc(cfg, force)
    events += run_systems(cfg, None, force)
    events += fuse(cfg, force)
    events += evaluate(cfg, force)
    return events
