"""
实验运行器

把数据生成、训练、攻击、评估、梯度校验、置信度网格与鲁棒性评估串成可复现的命令。
所有子种子都由主种子按标签派生；所有产物都带配置哈希与主种子。

输出目录结构::

    data/{train,test,aux}.csv, data/provenance.json
    models/<name>.json, models/<name>_history.csv, models/training.json
    attacks/<name>/<mode>/attack_run.json (+ trajectories/*.csv)
    metrics/<name>.json, metrics/<name>_gradient_similarity.csv, metrics/<name>_embedding.csv
    robustness/<name>_<attack>.json
    grids/<name>_confidence.csv
    verification.json, summary.json
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from mia_lab.classifier import MlpClassifier, MlpConfig, ece, train
from mia_lab.data import LabeledDataset, gen_blobs, load_csv, save_csv, split
from mia_lab.inversion import (
    AttackConfig,
    AttackRun,
    Prior,
    fit_pca_prior,
    read_attack_run,
    run_ppa,
    simple_invert,
)
from mia_lab.metrics import (
    MetricsReport,
    attack_accuracy,
    default_top_k,
    embedding_stats,
    feature_distance,
    gradient_cosine_series,
    gradient_stability,
    input_distance,
    knowledge_extraction,
    logit_stats,
)
from mia_lab.robustness import RobustnessConfig, robustness_report
from mia_lab.verification import VerificationReport, render_report, run_verification
from utils.artifacts import (
    derive_seed,
    ensure_dir,
    file_sha256,
    read_json,
    read_payload,
    write_frame,
    write_payload,
)
from utils.error_handler import (
    ArtifactIOError,
    ConfigError,
    DataValidationError,
    InvalidArgumentError,
    StageError,
)
from utils.performance import get_performance_monitor
from utils.resource_optimizer import IndexedTaskPool

from experiments.config import ExperimentConfig, save_config


EVAL_MODEL = "eval_model"
SIMPLE_MODES = ("simple", "simple_uncapped")
DELTA_NOTE = "δ_face 在桌面规模下没有对应的特征空间，只报告 δ_eval 与 δ_input"


class ExperimentRunner:
    """按配置执行实验命令"""

    def __init__(self, config: ExperimentConfig, jobs: int = 1):
        self.config = config
        self.jobs = max(1, int(jobs))
        self.out = ensure_dir(config.output_path)
        self.config_hash = config.fingerprint

    # ------------------------------------------------------------------
    # 公共工具
    # ------------------------------------------------------------------
    def seed(self, *labels: Any) -> int:
        return derive_seed(self.config.master_seed, *labels)

    def provenance(self, command: str, **extra: Any) -> Dict[str, Any]:
        return {
            "command": command,
            "config_hash": self.config_hash,
            "master_seed": self.config.master_seed,
            **extra,
        }

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def relative(self, path: Path) -> str:
        return Path(path).relative_to(self.out).as_posix()

    def variant_names(self, requested: Optional[List[str]] = None) -> List[str]:
        names = [v.name for v in self.config.model.variants]
        if not requested:
            return names
        unknown = [n for n in requested if n not in names]
        if unknown:
            raise InvalidArgumentError(f"未知的模型变体: {unknown}（可选: {names}）")
        return list(requested)

    def load_split(self, name: str) -> LabeledDataset:
        return load_csv(self.path("data", f"{name}.csv"))

    def checkpoint_path(self, name: str) -> Path:
        return self.path("models", f"{name}.json")

    def load_model(self, name: str) -> Tuple[MlpClassifier, str]:
        path = self.checkpoint_path(name)
        if not path.is_file():
            raise ArtifactIOError(f"找不到模型检查点 {path}，请先执行 train 命令")
        return MlpClassifier.load(path), file_sha256(path)

    # ------------------------------------------------------------------
    # gen-data
    # ------------------------------------------------------------------
    def cmd_gen_data(self) -> Dict[str, str]:
        """生成（或读取）数据并划分为辅助集、训练集与测试集"""
        data = self.config.data
        if data.path:
            full = load_csv(data.path)
        else:
            spec = data.blobs.model_copy(update={"seed": self.seed("data", "blobs")})
            full = gen_blobs(spec)

        rest, aux = split(full, data.aux_fraction, self.seed("data", "aux"))
        train_set, test_set = split(rest, data.test_fraction, self.seed("data", "test"))

        files = {}
        for name, dataset in (("train", train_set), ("test", test_set), ("aux", aux)):
            files[name] = save_csv(dataset, self.path("data", f"{name}.csv"))

        payload = {
            "source": data.path or "blobs",
            "input_dim": full.input_dim,
            "class_count": full.class_count,
            "splits": {
                name: {
                    "file": self.relative(path),
                    "sha256": file_sha256(path),
                    "size": len(ds),
                    "class_counts": ds.class_counts().tolist(),
                }
                for (name, path), ds in zip(files.items(), (train_set, test_set, aux))
            },
            "generation": full.provenance,
        }
        write_payload(self.path("data", "provenance.json"), payload, self.provenance("gen-data"))
        save_config(self.config, self.path("config.json"))
        logger.info(
            f"📦 数据已生成: 训练 {len(train_set)}, 测试 {len(test_set)}, 辅助 {len(aux)}"
        )
        return {name: str(path) for name, path in files.items()}

    # ------------------------------------------------------------------
    # train
    # ------------------------------------------------------------------
    def _training_jobs(self, names: List[str], input_dim: int, num_classes: int):
        section = self.config.model
        jobs = []
        for variant in section.variants:
            if variant.name not in names:
                continue
            mlp = MlpConfig(
                input_dim=input_dim,
                hidden_dims=section.hidden_dims,
                num_classes=num_classes,
                batch_norm=section.batch_norm,
            )
            training = section.training.model_copy(update={
                "seed": self.seed("train", variant.name),
                "smoothing": variant.schedule(section.training.epochs),
            })
            jobs.append((variant.name, variant.alpha, mlp, training))

        eval_section = self.config.eval_model
        eval_training = (eval_section.training or section.training).model_copy(
            update={"seed": self.seed("train", EVAL_MODEL)}
        )
        eval_mlp = MlpConfig(
            input_dim=input_dim,
            hidden_dims=eval_section.resolve_hidden(section.hidden_dims),
            num_classes=num_classes,
            batch_norm=section.batch_norm,
        )
        jobs.append((EVAL_MODEL, 0.0, eval_mlp, eval_training))
        return jobs

    def cmd_train(self, variants: Optional[List[str]] = None) -> Dict[str, str]:
        """训练目标模型各变体以及独立的评估模型"""
        names = self.variant_names(variants)
        train_set, test_set = self.load_split("train"), self.load_split("test")
        jobs = self._training_jobs(names, train_set.input_dim, train_set.class_count)

        def run_job(_: int, job) -> Dict[str, Any]:
            name, alpha, mlp, training = job
            logger.info(f"🏋️ 训练模型 {name} (alpha={alpha})")
            model = MlpClassifier(mlp, seed=self.seed("init", name))
            model, history = train(model, train_set, training, eval_data=test_set)
            checkpoint = model.save(
                self.checkpoint_path(name),
                provenance=self.provenance("train", model=name, train_seed=training.seed),
            )
            write_frame(self.path("models", f"{name}_history.csv"), history.to_frame())
            final = history.records[-1]
            return {
                "name": name,
                "target_alpha": alpha,
                "hidden_dims": mlp.hidden_dims,
                "epochs": len(history),
                "train_seed": training.seed,
                "final_loss": final.loss,
                "train_accuracy": final.train_accuracy,
                "test_accuracy": final.test_accuracy,
                "test_ece": final.test_ece,
                "checkpoint": self.relative(checkpoint),
                "checkpoint_sha256": file_sha256(checkpoint),
            }

        results = IndexedTaskPool(self.jobs).map_indexed(run_job, jobs)
        write_payload(
            self.path("models", "training.json"),
            {"models": {r["name"]: r for r in results}},
            self.provenance("train"),
        )
        return {r["name"]: str(self.path(r["checkpoint"])) for r in results}

    # ------------------------------------------------------------------
    # attack
    # ------------------------------------------------------------------
    def build_prior(self, aux: LabeledDataset) -> Prior:
        section = self.config.prior
        if section.kind == "identity":
            return Prior.identity(aux.input_dim)
        if len(aux) == 0:
            raise ConfigError("PCA 先验需要非空的辅助数据集，请调大 data.aux_fraction")
        return fit_pca_prior(aux.features, section.latent_dim or aux.input_dim)

    def _attack_config(self, mode: str) -> AttackConfig:
        base: AttackConfig = getattr(self.config.attack, mode)
        transform = base.transform.reseeded(self.seed("attack", mode, "transform"))
        return base.model_copy(update={"seed": self.seed("attack", mode), "transform": transform})

    def _simple_starts(self, aux: LabeledDataset) -> np.ndarray:
        section = self.config.attack
        members = aux.of_class(section.source_class)
        if members.shape[0] == 0:
            raise DataValidationError(f"辅助集中没有源类别 {section.source_class} 的样本，无法确定攻击起点")
        if members.shape[0] < section.start_count:
            logger.warning(
                f"⚠️ 源类别 {section.source_class} 只有 {members.shape[0]} 个辅助样本，"
                f"少于 start_count={section.start_count}"
            )
        return members[: section.start_count]

    def attack_dir(self, name: str, mode: str) -> Path:
        return self.path("attacks", name, mode)

    def cmd_attack(self, mode: str = "ppa", variants: Optional[List[str]] = None) -> Dict[str, str]:
        """对各目标模型执行简单攻击（含不设停止条件的版本）或三阶段攻击"""
        if mode not in ("simple", "ppa"):
            raise InvalidArgumentError(f"未知的攻击模式: {mode}")
        aux = self.load_split("aux")
        written: Dict[str, str] = {}
        for name in self.variant_names(variants):
            model, checkpoint_hash = self.load_model(name)
            if mode == "simple":
                starts = self._simple_starts(aux)
                target = self.config.attack.target_class
                for sub_mode in SIMPLE_MODES:
                    config = self._attack_config(sub_mode)
                    trajectories = [
                        simple_invert(model, target, start, config, candidate_index=i)
                        for i, start in enumerate(starts)
                    ]
                    run = AttackRun.from_simple(trajectories, config)
                    provenance = self.provenance(
                        "attack", model=name, mode=sub_mode, checkpoint_sha256=checkpoint_hash,
                        source_class=self.config.attack.source_class,
                    )
                    written[f"{name}/{sub_mode}"] = str(run.save(self.attack_dir(name, sub_mode), provenance))
                continue

            prior = self.build_prior(aux)
            classes = self.config.attack.target_classes or list(range(model.config.num_classes))
            provenance = self.provenance(
                "attack", model=name, mode="ppa", checkpoint_sha256=checkpoint_hash, prior=prior.to_dict()
            )
            try:
                run = run_ppa(model, prior, classes, self._attack_config("ppa"), jobs=self.jobs)
            except StageError as e:
                partial = getattr(e, "partial_run", None)
                if partial is not None:
                    partial.save(self.attack_dir(name, "ppa"), {**provenance, "partial": True, "failed_stage": e.stage})
                    logger.warning(f"⚠️ 已保存阶段 {e.stage} 之前的部分结果")
                raise
            written[f"{name}/ppa"] = str(run.save(self.attack_dir(name, "ppa"), provenance))
        return written

    # ------------------------------------------------------------------
    # evaluate
    # ------------------------------------------------------------------
    def _top_k(self, num_classes: int) -> Tuple[int, List[str]]:
        k = self.config.metrics.top_k
        if k is None:
            k = default_top_k(num_classes)
            return k, [f"k 取默认值 min(5, C-1) = {k}"]
        if k >= num_classes:
            raise InvalidArgumentError(f"metrics.top_k={k} 必须小于类别数 {num_classes}")
        return k, []

    def evaluate_variant(
        self,
        name: str,
        eval_model: MlpClassifier,
        eval_hash: str,
        train_set: LabeledDataset,
        test_set: LabeledDataset,
    ) -> Tuple[MetricsReport, Dict[str, Any]]:
        mode = self.config.metrics.attack_mode
        run_path = self.attack_dir(name, mode) / "attack_run.json"
        artifacts = read_attack_run(run_path)
        model, checkpoint_hash = self.load_model(name)
        recon = artifacts.reconstructions
        num_classes = train_set.class_count
        k, notes = self._top_k(num_classes)
        notes.append(DELTA_NOTE)

        acc1, acck = attack_accuracy(eval_model, recon, k)
        counts = {c: len(points) for c, points in recon.items()}
        total = sum(counts.values())
        delta_eval = sum(feature_distance(eval_model, p, train_set, c) * counts[c] for c, p in recon.items()) / total
        delta_input = sum(input_distance(p, train_set, c) * counts[c] for c, p in recon.items()) / total

        if all(counts.get(c, 0) > 0 for c in range(num_classes)):
            surrogate = self.config.metrics.surrogate.model_copy(update={"seed": self.seed("surrogate", name)})
            xi_train, xi_test = knowledge_extraction(recon, train_set, test_set, surrogate)
        else:
            xi_train = xi_test = float("nan")
            notes.append("重建结果未覆盖全部类别，未计算知识提取分数")

        test_ece = (
            ece(model.predict_proba(test_set.features), test_set.labels, self.config.metrics.ece_bins)
            if len(test_set) else float("nan")
        )
        embedding = embedding_stats(model, train_set)

        stability = self.config.metrics.stability
        source = mode if stability is None else "random_targets"
        try:
            if stability is None:
                similarity = gradient_cosine_series(artifacts.trajectories)
            else:
                similarity = gradient_stability(
                    model,
                    self.build_prior(self.load_split("aux")),
                    stability.model_copy(update={"seed": self.seed("stability")}),
                    jobs=self.jobs,
                )
            gradient_summary = {
                "source": source,
                "mean": similarity.mean_similarity,
                "trajectories": len(similarity.per_trajectory_mean),
                "excluded_trajectories": similarity.excluded_trajectories,
            }
            write_frame(self.path("metrics", f"{name}_gradient_similarity.csv"), similarity.series)
        except InvalidArgumentError as e:
            excluded = len(artifacts.trajectories) if stability is None else stability.trajectories
            gradient_summary = {"source": source, "mean": None, "trajectories": 0, "excluded_trajectories": excluded}
            notes.append(f"梯度相似度不可用: {e}")
        write_frame(self.path("metrics", f"{name}_embedding.csv"), embedding.per_sample)

        report = MetricsReport(
            acc_at_1=acc1,
            acc_at_k=acck,
            k=k,
            delta_eval=float(delta_eval),
            delta_input=float(delta_input),
            xi_train=xi_train,
            xi_test=xi_test,
            ece=test_ece,
            embedding=embedding.to_dict(),
            gradient_similarity=gradient_summary,
            logit_intra_inter_ratio=logit_stats(model, train_set).intra_inter_ratio,
            attack_steps=[t.steps for t in artifacts.trajectories],
            stop_reasons=[t.stop_reason for t in artifacts.trajectories],
            notes=notes,
        )
        provenance = self.provenance(
            "evaluate",
            model=name,
            attack_mode=mode,
            checkpoint_sha256=checkpoint_hash,
            eval_model={
                "checkpoint_sha256": eval_hash,
                "hidden_dims": eval_model.config.hidden_dims,
                "init_seed": eval_model.seed,
            },
            attack_run_hash=read_json(run_path)["payload_hash"],
        )
        return report, provenance

    def cmd_evaluate(self, variants: Optional[List[str]] = None) -> Dict[str, Dict[str, Any]]:
        """计算完整的评估指标报告"""
        eval_model, eval_hash = self.load_model(EVAL_MODEL)
        train_set, test_set = self.load_split("train"), self.load_split("test")
        reports = {}
        for name in self.variant_names(variants):
            report, provenance = self.evaluate_variant(name, eval_model, eval_hash, train_set, test_set)
            write_payload(self.path("metrics", f"{name}.json"), report.to_dict(), provenance)
            reports[name] = report.to_dict()
            logger.info(
                f"📊 {name}: acc@1={report.acc_at_1:.3f}, δ_eval={report.delta_eval:.3f}, "
                f"ξ_train={report.xi_train:.3f}"
            )
        return reports

    # ------------------------------------------------------------------
    # verify-gradients / confidence-grid / robustness
    # ------------------------------------------------------------------
    def cmd_verify_gradients(self, instances: int = 1000, network_instances: int = 20) -> VerificationReport:
        report = run_verification(self.seed("verify"), instances, network_instances)
        write_payload(self.path("verification.json"), report.to_dict(), self.provenance("verify-gradients"))
        render_report(report)
        report.assert_passed()
        return report

    def cmd_confidence_grid(
        self,
        name: str,
        bounds: Optional[Tuple[float, float, float, float]] = None,
        resolution: Optional[int] = None,
    ) -> Path:
        """在二维规则网格上输出每个类别的预测概率"""
        model, _ = self.load_model(name)
        if model.config.input_dim != 2:
            raise InvalidArgumentError(f"置信度网格只支持二维输入，模型输入维度为 {model.config.input_dim}")
        x_min, x_max, y_min, y_max = bounds or self.config.grid.bounds
        resolution = resolution or self.config.grid.resolution
        if resolution < 2 or not (x_min < x_max and y_min < y_max):
            raise InvalidArgumentError("网格范围或分辨率无效")

        xx, yy = np.meshgrid(np.linspace(x_min, x_max, resolution), np.linspace(y_min, y_max, resolution))
        points = np.column_stack([xx.ravel(), yy.ravel()])
        probs = model.predict_proba(points)
        frame = pd.DataFrame({"x1": points[:, 0], "x2": points[:, 1]})
        for c in range(probs.shape[1]):
            frame[f"p_{c}"] = probs[:, c]
        return write_frame(self.path("grids", f"{name}_confidence.csv"), frame)

    def cmd_robustness(
        self, attack: Optional[str] = None, variants: Optional[List[str]] = None, **params: Any
    ) -> Dict[str, Dict[str, Any]]:
        """在测试集上运行对抗攻击（无目标与有目标）"""
        base = self.config.robustness
        update = {k: v for k, v in params.items() if v is not None}
        if attack is not None:
            update["attack"] = attack
        config = RobustnessConfig.model_validate({**base.model_dump(), **update, "seed": self.seed("robustness")})
        test_set = self.load_split("test")
        reports = {}
        for name in self.variant_names(variants):
            model, checkpoint_hash = self.load_model(name)
            report = robustness_report(model, test_set, config)
            write_payload(
                self.path("robustness", f"{name}_{config.attack}.json"),
                report,
                self.provenance("robustness", model=name, checkpoint_sha256=checkpoint_hash),
            )
            reports[name] = report
        return reports

    # ------------------------------------------------------------------
    # run-all
    # ------------------------------------------------------------------
    def simple_attack_summary(self, name: str, mode: str, train_set: LabeledDataset) -> Dict[str, Any]:
        """多个起点时步数与终点距离取中位数，逐起点的取值一并列出"""
        payload = read_payload(self.attack_dir(name, mode) / "attack_run.json")
        target = self.config.attack.target_class
        entry = payload["classes"][str(target)]
        points = np.asarray(entry["selected"]["points"], dtype=np.float64)
        steps = [t["steps"] for t in entry["trajectories"]]
        distances = [input_distance(p[None, :], train_set, target) for p in points]
        return {
            "starts": len(steps),
            "steps": float(np.median(steps)),
            "nearest_train_distance": float(np.median(distances)),
            "per_start": [
                {
                    "steps": t["steps"],
                    "stop_reason": t["stop_reason"],
                    "final_confidence": t["final_confidence"],
                    "nearest_train_distance": d,
                }
                for t, d in zip(entry["trajectories"], distances)
            ],
        }

    def cmd_run_all(self) -> Dict[str, Any]:
        """完整流程：gen-data → train → attack(simple, ppa) → evaluate → robustness"""
        monitor = get_performance_monitor()
        with monitor.track("run-all:gen-data"):
            self.cmd_gen_data()
        with monitor.track("run-all:train"):
            self.cmd_train()
        with monitor.track("run-all:attack"):
            self.cmd_attack("simple")
            self.cmd_attack("ppa")
        with monitor.track("run-all:evaluate"):
            metrics = self.cmd_evaluate()
        by_attack = {}
        with monitor.track("run-all:robustness"):
            for attack in dict.fromkeys(["fgsm", self.config.robustness.attack]):
                by_attack[attack] = self.cmd_robustness(attack=attack)

        train_set = self.load_split("train")
        models: Dict[str, Dict[str, Any]] = {}
        for name in self.variant_names():
            models[name] = {
                "simple": self.simple_attack_summary(name, "simple", train_set),
                "simple_uncapped": self.simple_attack_summary(name, "simple_uncapped", train_set),
                "acc_at_1": metrics[name]["acc_at_1"],
                "xi_train": metrics[name]["xi_train"],
                "delta_eval": metrics[name]["delta_eval"],
                "mean_gradient_similarity": metrics[name]["gradient_similarity"]["mean"],
                "intra_inter_ratio": metrics[name]["embedding"]["intra_inter_ratio"],
                "logit_intra_inter_ratio": metrics[name]["logit_intra_inter_ratio"],
                "robustness": {
                    attack: {
                        "untargeted": reports[name]["untargeted_success_rate"],
                        "targeted": reports[name]["targeted_success_rate"],
                        "sweep": reports[name]["sweep"],
                    }
                    for attack, reports in by_attack.items()
                },
            }

        summary = {"models": models, "orderings": summarize_orderings(models)}
        write_payload(self.path("summary.json"), summary, self.provenance("run-all"))
        logger.info(f"🏁 全流程完成，摘要: {self.path('summary.json')}")
        return summary


# hard 与 neg 的平均梯度相似度至少相差这么多才算方向成立
GRADIENT_SIMILARITY_MARGIN = 0.2


def rank(values: Dict[str, Optional[float]], descending: bool) -> List[str]:
    """按指标值排序的模型名称（缺失值排在最后，同值按名称）"""
    present = {k: v for k, v in values.items() if v is not None and np.isfinite(v)}
    ordered = sorted(present, key=lambda k: ((-present[k] if descending else present[k]), k))
    return ordered + sorted(k for k in values if k not in present)


def holds(
    values: Dict[str, Optional[float]], order: List[str], strict: bool = False, margin: float = 0.0
) -> Optional[bool]:
    """检查 values 是否按 order 非增（strict 时严格递减）

    margin > 0 时要求相邻两项之差至少为 margin。缺少任一模型时返回 None。
    """
    if any(values.get(name) is None or not np.isfinite(values[name]) for name in order):
        return None
    pairs = list(zip(order, order[1:]))
    if margin > 0.0:
        return all(values[a] - values[b] >= margin for a, b in pairs)
    if strict:
        return all(values[a] > values[b] for a, b in pairs)
    return all(values[a] >= values[b] for a, b in pairs)


def summarize_orderings(models: Dict[str, Dict[str, Any]]) -> Dict[str, Any]:
    """汇总各指标在模型之间的排序，以及 pos/hard/neg 的预期方向是否成立"""
    def column(getter) -> Dict[str, Optional[float]]:
        return {name: getter(entry) for name, entry in models.items()}

    # 每项: (取值, 预期从大到小的模型顺序, 是否要求严格递减, 最小差值)
    expected = ["pos", "hard", "neg"]
    metrics = {
        "simple_distance": (column(lambda m: -m["simple"]["nearest_train_distance"]), expected, True, 0.0),
        "simple_steps": (column(lambda m: float(m["simple"]["steps"])), expected, True, 0.0),
        "acc_at_1": (column(lambda m: m["acc_at_1"]), expected, False, 0.0),
        "xi_train": (column(lambda m: m["xi_train"]), expected, False, 0.0),
        "neg_delta_eval": (column(lambda m: -m["delta_eval"]), expected, False, 0.0),
        "gradient_similarity": (
            column(lambda m: m["mean_gradient_similarity"]), ["hard", "neg"], True, GRADIENT_SIMILARITY_MARGIN,
        ),
        "neg_intra_inter_ratio": (column(lambda m: -m["intra_inter_ratio"]), ["pos", "hard"], True, 0.0),
        "neg_logit_intra_inter_ratio": (
            column(lambda m: -m.get("logit_intra_inter_ratio", float("nan"))), ["pos", "hard"], True, 0.0,
        ),
    }
    # 无目标攻击成功率：预期 hard 高于 neg
    attacks = sorted({a for m in models.values() for a in m.get("robustness", {})})
    for attack in attacks:
        metrics[f"{attack}_untargeted_success"] = (
            column(lambda m, a=attack: m.get("robustness", {}).get(a, {}).get("untargeted")),
            ["hard", "neg"],
            True,
            0.0,
        )

    out: Dict[str, Any] = {}
    for key, (values, order, strict, margin) in metrics.items():
        out[key] = {
            "ranking": rank(values, descending=True),
            "expected": order,
            "holds": holds(values, order, strict, margin) if all(n in values for n in order) else None,
        }
        if margin > 0.0:
            out[key]["margin"] = margin
    return out
