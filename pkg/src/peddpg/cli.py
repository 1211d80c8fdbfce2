"""Command-line entry point: ``peddpg train | eval | count-params | oracle``."""

import sys

import click

from peddpg import harness
from peddpg.nn import CheckpointError
from peddpg.oracle import InfeasiblePlanError
from peddpg.sim import ConfigError

EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_RUNTIME = 4


def _fail(kind, message, code):
    click.echo(f"error[{kind}]: {message}", err=True)
    sys.exit(code)


def _resolve(config, overrides, seeds, episodes):
    extra = list(overrides)
    if seeds:
        extra.append(f"run.seeds = {seeds}")
    if episodes is not None:
        extra.append(f"run.episodes = {episodes}")
    return harness.resolve_config(config, extra)


def _guarded(fn):
    try:
        return fn()
    except ConfigError as exc:
        _fail("config", str(exc), EXIT_CONFIG)
    except (CheckpointError, FileNotFoundError) as exc:
        _fail("checkpoint", str(exc), EXIT_CHECKPOINT)
    except (InfeasiblePlanError, ValueError) as exc:
        _fail("runtime", str(exc), EXIT_RUNTIME)


config_option = click.option(
    "--config", "config", type=click.Path(exists=True, dir_okay=False), help="Flat key = value config file."
)
set_option = click.option(
    "--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one config key; repeatable."
)
seeds_option = click.option("--seeds", help="Comma-separated seeds, e.g. 0,1,2 (sets run.seeds).")
out_option = click.option(
    "--out", "root", type=click.Path(file_okay=False),
    help=f"Output root (default: ${harness.OUTPUT_ROOT_ENV} or ./runs).",
)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Energy-efficient video streaming with FC and PE/PI DDPG."""


@main.command("train")
@config_option
@set_option
@seeds_option
@click.option("--episodes", type=int, help="Training episodes per seed (sets run.episodes).")
@out_option
def train_cmd(config, overrides, seeds, episodes, root):
    """Train one agent per seed; write traces, an aggregate CSV and checkpoints."""

    def go():
        cfg = _resolve(config, overrides, seeds, episodes)
        out = harness.cmd_train(cfg, root, log=lambda m: click.echo(m, err=True))
        click.echo(str(out))

    _guarded(go)


@main.command("eval")
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@config_option
@set_option
@seeds_option
@click.option("--episodes", type=int, help="Evaluation episodes per seed (sets run.eval_episodes).")
@out_option
def eval_cmd(checkpoint, config, overrides, seeds, episodes, root):
    """Greedy evaluation of a checkpoint next to a random-action baseline."""

    def go():
        extra = list(overrides) + ([f"run.eval_episodes = {episodes}"] if episodes is not None else [])
        cfg = _resolve(config, extra, seeds, None)
        out, summary = harness.cmd_eval(cfg, checkpoint, root)
        for policy in ("greedy", "random"):
            s = summary[policy]
            click.echo(
                f"{policy:>7}: return {s['return']:.4f}  energy {s['energy_J']:.4f} J  "
                f"penalty {s['penalty']:.4f}  stalls {s['stalls']:.3f}"
            )
        click.echo(str(out))

    _guarded(go)


@main.command("count-params")
@config_option
@set_option
def count_params_cmd(config, overrides):
    """Free-parameter counts of FC vs PE/PI actor-critic networks.

    Columns: fc/pe, w = weights only or wb = weights and biases, mains = actor
    and critic or all = including both target networks.
    """

    def go():
        cfg = harness.resolve_config(config, overrides)
        click.echo(harness.format_count_table(harness.count_table(cfg)))

    _guarded(go)


@main.command("oracle")
@config_option
@set_option
@seeds_option
@click.option("--episodes", type=int, help="Planned episodes per seed (sets run.eval_episodes).")
@out_option
def oracle_cmd(config, overrides, seeds, episodes, root):
    """Perfect-prediction rate plans on the evaluation episodes."""

    def go():
        extra = list(overrides) + ([f"run.eval_episodes = {episodes}"] if episodes is not None else [])
        cfg = _resolve(config, extra, seeds, None)
        out, summary = harness.cmd_oracle(cfg, root)
        click.echo(
            f"oracle: return {summary['return']:.4f}  energy {summary['energy_J']:.4f} J  "
            f"penalty {summary['penalty']:.4f}  stalls {summary['stalls']:.3f}  "
            f"max KKT residual {summary['max_kkt_residual']:.2e}"
        )
        click.echo(str(out))

    _guarded(go)


if __name__ == "__main__":
    main()
