#!/usr/bin/env python3
"""
标签平滑与模型反演实验台 - 命令行入口

子命令：gen-data、train、attack、evaluate、verify-gradients、confidence-grid、
robustness、run-all、show-config
"""

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import click
from dotenv import load_dotenv
from loguru import logger
from rich.console import Console

from experiments.config import ExperimentConfig, load_config
from experiments.presets import ExperimentPresets
from experiments.runner import EVAL_MODEL, ExperimentRunner
from utils.artifacts import canonical_json, to_jsonable
from utils.error_handler import get_error_handler
from utils.performance import get_performance_monitor


LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"

console = Console()
error_handler = get_error_handler()


def setup_logging(level: str = "INFO", log_dir: str = "logs"):
    """设置日志配置"""
    log_path = Path(log_dir)
    log_path.mkdir(parents=True, exist_ok=True)

    logger.remove()
    logger.add(sys.stderr, level=level, format="{time:HH:mm:ss} | {level: <8} | {message}")
    logger.add(
        log_path / "mia_lab.log",
        rotation="1 day",
        retention="30 days",
        format=LOG_FORMAT,
        level=level,
        encoding="utf-8",
    )


def load_environment() -> bool:
    """加载 .env 中的 MIA_LAB_* 默认值"""
    env_file = Path(".env")
    if env_file.exists():
        load_dotenv(env_file)
        return True
    return False


@dataclass
class CliState:
    """全局选项"""
    config_source: Optional[str]
    seed: Optional[int]
    out: Optional[str]
    jobs: int

    def config(self) -> ExperimentConfig:
        return load_config(self.config_source).with_overrides(seed=self.seed, out=self.out)

    def runner(self) -> ExperimentRunner:
        config = self.config()
        logger.info(
            f"⚙️ 实验 {config.name}: 主种子 {config.master_seed}, 输出目录 {config.output_dir}, "
            f"并行度 {self.jobs}"
        )
        return ExperimentRunner(config, jobs=self.jobs)


def show(result) -> None:
    console.print_json(canonical_json(to_jsonable(result)))


variant_option = click.option(
    "--variant", "variants", multiple=True, help="只处理指定的模型变体（可重复）"
)


@click.group()
@click.option("--config", "config_source", default=None,
              help=f"配置文件（JSON/YAML）或 preset:<name>，可选预设: {', '.join(ExperimentPresets.names())}")
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="覆盖配置中的主种子")
@click.option("--out", default=None, envvar="MIA_LAB_OUT_DIR", help="覆盖配置中的输出目录")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="并行任务数")
@click.option("--log-level", default="INFO", envvar="MIA_LAB_LOG_LEVEL", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.option("--log-dir", default="logs", envvar="MIA_LAB_LOG_DIR", show_default=True)
@click.pass_context
def cli(ctx, config_source, seed, out, jobs, log_level, log_dir):
    """标签平滑 α ∈ (−∞, 1] 与模型反演攻击的实验台"""
    setup_logging(log_level.upper(), log_dir)
    ctx.obj = CliState(config_source=config_source, seed=seed, out=out, jobs=jobs)


@cli.command("gen-data")
@click.pass_obj
@error_handler.wrap_command("gen-data")
def gen_data(state: CliState):
    """生成团簇数据（或读取 data.path）并划分训练/测试/辅助集"""
    show(state.runner().cmd_gen_data())


@cli.command("train")
@variant_option
@click.pass_obj
@error_handler.wrap_command("train")
def train_models(state: CliState, variants: Tuple[str, ...]):
    """训练各目标模型变体与评估模型"""
    show(state.runner().cmd_train(list(variants) or None))


@cli.command("attack")
@click.option("--mode", type=click.Choice(["simple", "ppa"]), default="ppa", show_default=True)
@variant_option
@click.pass_obj
@error_handler.wrap_command("attack")
def attack(state: CliState, mode: str, variants: Tuple[str, ...]):
    """对目标模型执行反演攻击"""
    show(state.runner().cmd_attack(mode, list(variants) or None))


@cli.command("evaluate")
@variant_option
@click.pass_obj
@error_handler.wrap_command("evaluate")
def evaluate(state: CliState, variants: Tuple[str, ...]):
    """计算攻击准确率、特征距离、知识提取、ECE 与嵌入统计"""
    reports = state.runner().cmd_evaluate(list(variants) or None)
    show({
        name: {key: report[key] for key in ("acc_at_1", "acc_at_k", "k", "delta_eval", "xi_train", "ece")}
        for name, report in reports.items()
    })


@cli.command("verify-gradients")
@click.option("--instances", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--network-instances", type=click.IntRange(min=1), default=20, show_default=True)
@click.pass_obj
@error_handler.wrap_command("verify-gradients")
def verify_gradients(state: CliState, instances: int, network_instances: int):
    """解析梯度与有限差分对照，任何检查超出容差时以非零状态退出"""
    state.runner().cmd_verify_gradients(instances, network_instances)


@cli.command("confidence-grid")
@click.option("--model", "model_name", required=True, help=f"模型名称（变体名或 {EVAL_MODEL}）")
@click.option("--bounds", type=float, nargs=4, default=None, help="x_min x_max y_min y_max")
@click.option("--resolution", type=click.IntRange(min=2), default=None)
@click.pass_obj
@error_handler.wrap_command("confidence-grid")
def confidence_grid(state: CliState, model_name: str, bounds, resolution):
    """在二维网格上导出每个类别的置信度"""
    path = state.runner().cmd_confidence_grid(model_name, bounds or None, resolution)
    console.print(f"💾 {path}")


@cli.command("robustness")
@click.option("--attack", type=click.Choice(["fgsm", "pgd", "bim"]), default=None)
@click.option("--epsilon", type=float, default=None)
@click.option("--step-size", type=float, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--sweep", type=float, multiple=True, help="额外评估的 eps 预算（可重复）")
@variant_option
@click.pass_obj
@error_handler.wrap_command("robustness")
def robustness(
    state: CliState, attack, epsilon, step_size, steps, sweep: Tuple[float, ...], variants: Tuple[str, ...]
):
    """在测试集上运行无目标与有目标的对抗攻击"""
    reports = state.runner().cmd_robustness(
        attack=attack, variants=list(variants) or None, epsilon=epsilon, step_size=step_size, steps=steps,
        sweep=list(sweep) or None,
    )
    show(reports)


@cli.command("run-all")
@click.pass_obj
@error_handler.wrap_command("run-all")
def run_all(state: CliState):
    """完整流程并写出 summary.json"""
    summary = state.runner().cmd_run_all()
    show(summary["orderings"])
    logger.debug(f"📊 性能统计: {get_performance_monitor().get_performance_report()}")


@cli.command("show-config")
@click.pass_obj
@error_handler.wrap_command("show-config")
def show_config(state: CliState):
    """输出解析后的配置（规范化 JSON）及其哈希"""
    config = state.config()
    click.echo(canonical_json(config.model_dump(mode="json")))
    click.echo(f"config_hash={config.fingerprint}")


def cli_main():
    """命令行入口函数"""
    load_environment()
    cli()


if __name__ == "__main__":
    cli_main()
