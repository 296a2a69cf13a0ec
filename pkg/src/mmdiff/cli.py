"""Command-line entry point: ``mmdiff <subcommand> [options]``.

Each command resolves its config (defaults < ``--config`` file < ``--set``),
does its work, writes its artifacts and a MetricReport JSON, and prints the
report. Contract violations exit with status 1 and a one-line diagnostic;
usage errors exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import config as C
from . import stages as S
from . import tensor as T
from .adapter import ContractError
from .align import eval_alignment
from .data import DialogueSample, gen_dataset, load_jsonl, save_jsonl, WorldSpec
from .denoiser import eval_bidiffuser_terms
from .diffusion import ConfigError
from .dialogue import prompt_ids
from .llm import perplexity
from .metrics import bleu, toy_fid
from .pipeline import System
from .report import MetricReport
from .text import CaptionCodebook, VocabError


def write_pgm(path, image) -> None:
    """Binary 8-bit graymap; pixel values in [-1, 1] map to 0..255."""
    img = np.asarray(image).reshape(image.shape[0], image.shape[1])
    v = np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode())
        f.write(v.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmdiff", description="Toy bidirectional diffusion + LLM system.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--report", help="MetricReport path (default: next to the main output)")
        return sp

    sp = add("gen-data", "write the synthetic dataset as JSON lines")
    sp.add_argument("--out", required=True)

    for name, help in (("pretrain-joint", "joint all-timestep denoiser training"),
                       ("finetune-bidiffuser", "bidirectional clean-condition finetuning")):
        sp = add(name, help)
        sp.add_argument("--data")
        sp.add_argument("--out", required=True)
        if name == "finetune-bidiffuser":
            sp.add_argument("--init", required=True, help="stage-unidiffuser checkpoint")

    sp = add("train-adapter", "train the adapter against the frozen denoiser")
    sp.add_argument("--init", required=True, help="stage-bidiffuser checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)
    sp.add_argument("--lambda", dest="lam", type=float, help="fusion weight (overrides adapter.lambda)")

    sp = add("align", "train the projection into the LLM")
    sp.add_argument("--init", required=True, help="stage-bidiffuser checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)
    sp.add_argument("--manner", choices=("pre", "mid"), default="pre")
    sp.add_argument("--freeze-llm", type=_bool, default=True)

    sp = add("train-dialogue", "tune LLM and adapter on photo-sharing dialogues")
    sp.add_argument("--init", required=True, help="stage-adapter checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)

    sp = add("generate", "run the pipeline and write images / JSON-lines records")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--task", choices=("caption", "vqa", "t2i", "dialogue"), required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--data")
    sp.add_argument("--index", type=int, action="append", help="dataset item(s) to use (default 0)")
    sp.add_argument("--text", action="append", help="caption (t2i) or user turn (dialogue)")
    sp.add_argument("--question", help="question for --task vqa")

    sp = add("evaluate", "compute a metric for a checkpoint")
    sp.add_argument("--ckpt")
    sp.add_argument("--data")
    sp.add_argument("--metric", required=True, choices=("alignment", "fid", "i2t", "ld", "bleu", "ppl"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="directory for the report (default: next to the checkpoint)")

    sp = add("gradcheck", "finite-difference check of every loss")
    sp.add_argument("--out", help="directory for the report")
    return p


# -- helpers ----------------------------------------------------------------

def _world(args, cfg) -> S.World:
    samples = load_jsonl(args.data) if getattr(args, "data", None) else None
    return S.World.build(samples, seed=cfg["run.seed"])


def _report_path(args, default: Path) -> Path:
    return Path(args.report) if args.report else default


def _emit(rep: MetricReport, path: Path) -> None:
    rep.save(path)
    print(rep.to_json())


def _load_system(path, world: S.World | None = None) -> tuple[System, ck.Checkpoint]:
    c = ck.load(path)
    dtype = c.meta.get("config", {}).get("run.dtype", "float64")
    T.set_default_dtype(dtype)
    cb = world.codebook if world is not None else None
    return System.from_checkpoint(c, cb), c


def _save(bundles, cfg, world, stage, out, **extra) -> str:
    c = ck.from_bundles(bundles, S.meta(cfg, world, stage, **extra))
    ck.save(c, out)
    return ck.file_digest(out)


def _denoiser_from(path, world, cfg, *stages):
    from .denoiser import JointDenoiser
    c = ck.load(path).require_stage(*stages)
    cfg.update(_sched_cfg(c))           # the schedule and text head travel with the weights
    T.set_default_dtype(cfg["run.dtype"])
    den = JointDenoiser(S.denoiser_config(cfg), params=c.bundle("denoiser/"), sched=S.schedule(cfg))
    return den, ck.file_digest(path)


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args, cfg):
    samples = gen_dataset(WorldSpec(seed=cfg["run.seed"]))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(samples, args.out)
    world = S.World.build(samples)
    imgs = world.x0.reshape(len(samples), -1)
    d2 = ((imgs[:, None] - imgs[None]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    return MetricReport("gen-data", {"n_samples": len(samples), "min_pairwise_image_dist": float(np.sqrt(d2.min())),
                                     "min_pairwise_latent_dist": world.codebook.min_pairwise_distance()},
                        cfg["run.seed"], dataset=world.dataset_hash, config=cfg), Path(args.out + ".report.json")


def cmd_pretrain_joint(args, cfg):
    world = _world(args, cfg)
    T.set_default_dtype(cfg["run.dtype"])
    den, log = S.pretrain_joint(world, cfg)
    h = _save({"denoiser": den.params}, cfg, world, "unidiffuser", args.out)
    L = eval_bidiffuser_terms(den, world.x0, world.y0, S.schedule(cfg))
    return MetricReport("pretrain-joint", {"final_loss": float(np.mean(log.losses[-20:])) if log.losses else float("nan"),
                                           "L_t2i": L[0], "L_i2t": L[1]},
                        cfg["run.seed"], {"out": h}, world.dataset_hash, cfg), Path(args.out + ".report.json")


def cmd_finetune(args, cfg):
    world = _world(args, cfg)
    den, h_in = _denoiser_from(args.init, world, cfg, "unidiffuser")
    sched = S.schedule(cfg)
    L0 = eval_bidiffuser_terms(den, world.x0, world.y0, sched)
    S.finetune_bidiffuser(den, world, cfg)
    L1 = eval_bidiffuser_terms(den, world.x0, world.y0, sched)
    a = cfg["denoiser.alpha"]
    h = _save({"denoiser": den.params}, cfg, world, "bidiffuser", args.out)
    ld0, ld1 = L0[0] + a * L0[1], L1[0] + a * L1[1]
    return MetricReport("finetune-bidiffuser", {"L_d_before": ld0, "L_d_after": ld1, "L_d_ratio": ld1 / ld0,
                                                "L_t2i": L1[0], "L_i2t": L1[1]},
                        cfg["run.seed"], {"init": h_in, "out": h}, world.dataset_hash, cfg), Path(args.out + ".report.json")


def cmd_train_adapter(args, cfg):
    if args.lam is not None:
        cfg["adapter.lambda"] = args.lam
    world = _world(args, cfg)
    den, h_in = _denoiser_from(args.init, world, cfg, "bidiffuser")
    llm, ad, losses = S.adapter_stage(den, world, cfg)
    h = _save({"denoiser": den.params, "llm": llm.params, "adapter": ad}, cfg, world, "adapter", args.out,
              llm_mode="decoder-only")
    n = max(1, len(losses) // 10)
    return MetricReport("train-adapter", {"loss_first": float(np.mean(losses[:n])), "loss_last": float(np.mean(losses[-n:])),
                                          "lambda": cfg["adapter.lambda"]},
                        cfg["run.seed"], {"init": h_in, "out": h}, world.dataset_hash, cfg), Path(args.out + ".report.json")


def cmd_align(args, cfg):
    world = _world(args, cfg)
    den, h_in = _denoiser_from(args.init, world, cfg, "bidiffuser", "adapter")
    llm, proj, log, _ = S.align_stage(den, world, cfg, args.manner, args.freeze_llm)
    Path(args.out + ".log.tsv").write_text(log.to_tsv())
    h = _save({"denoiser": den.params, "llm": llm.params, "proj": proj}, cfg, world, f"align-{args.manner}",
              args.out, llm_mode=llm.mode, freeze_llm=args.freeze_llm)
    last = log.rows[-1] if log.rows else (0, float("nan"), float("nan"))
    return MetricReport("align", {"cosine_before": log.before[0], "mse_before": log.before[1],
                                  "cosine_after": log.after[0], "mse_after": log.after[1],
                                  "L_ITG_last": last[1], "L_ITDM_last": last[2]},
                        cfg["run.seed"], {"init": h_in, "out": h}, world.dataset_hash, cfg,
                        {"manner": args.manner, "freeze_llm": args.freeze_llm}), Path(args.out + ".report.json")


def cmd_train_dialogue(args, cfg):
    from .llm import LLMConfig, ToyLLM
    world = _world(args, cfg)
    c = ck.load(args.init).require_stage("adapter")
    den, h_in = _denoiser_from(args.init, world, cfg, "adapter")
    llm = ToyLLM(LLMConfig(len(world.vocab)), params=c.bundle("llm/"))
    ad = c.bundle("adapter/")
    log = S.dialogue_stage(den, llm, ad, world, cfg)
    h = _save({"denoiser": den.params, "llm": llm.params, "adapter": ad}, cfg, world, "dialogue", args.out,
              llm_mode="decoder-only")
    n = max(1, len(log.rows) // 10)
    first, last = log.rows[:n], log.rows[-n:]
    return MetricReport("train-dialogue", {"L_t2i_first": float(np.mean([r[1] for r in first])),
                                           "L_t2i_last": float(np.mean([r[1] for r in last])),
                                           "L_t2t_first": float(np.mean([r[2] for r in first])),
                                           "L_t2t_last": float(np.mean([r[2] for r in last]))},
                        cfg["run.seed"], {"init": h_in, "out": h}, world.dataset_hash, cfg), Path(args.out + ".report.json")


def cmd_generate(args, cfg):
    world = _world(args, cfg)
    sysm, c = _load_system(args.ckpt, world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, metrics = [], {}
    idx = args.index or [0]
    if args.task in ("caption", "vqa"):
        hits = 0
        for i in idx:
            text, rec = sysm.image_to_text(world.x0[i], args.task, args.question, seed=args.seed)
            records.append({**rec.to_dict(), "index": i})
            if args.task == "caption":
                hits += text == world.captions[i]
        if args.task == "caption":
            metrics["exact_match"] = hits / len(idx)
    elif args.task == "t2i":
        texts = args.text or [world.captions[i] for i in idx]
        for k, t in enumerate(texts):
            img, rec = sysm.text_to_image(t, seed=args.seed)
            name = f"t2i-{k}-seed{args.seed}.pgm"
            write_pgm(out / name, img)
            records.append({**rec.to_dict(), "image": name})
    else:
        turns = args.text or [f"can you show me {world.captions[i]} ?" for i in idx]
        for k, t in enumerate(turns):
            text, img, rec = sysm.dialogue_respond(DialogueSample([("USER", t)], ""), seed=args.seed)
            d = {**rec.to_dict(), "visible": text}
            if img is not None:
                name = f"dialogue-{k}-seed{args.seed}.pgm"
                write_pgm(out / name, img)
                d["image"] = name
            records.append(d)
    (out / "calls.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    metrics["n_calls"] = len(records)
    return MetricReport("generate", metrics, args.seed, {"ckpt": ck.file_digest(args.ckpt)}, world.dataset_hash,
                        cfg, {"task": args.task}), out / "report.json"


def cmd_evaluate(args, cfg):
    world = _world(args, cfg)
    default_dir = Path(args.out) if args.out else Path(args.ckpt or ".").parent
    path = default_dir / f"evaluate-{args.metric}.report.json"
    if args.ckpt is None:
        raise ConfigError(f"--metric {args.metric} needs --ckpt")
    sysm, c = _load_system(args.ckpt, world)
    hashes = {"ckpt": ck.file_digest(args.ckpt)}
    m: dict[str, float] = {}
    if args.metric == "alignment":
        c.require_stage("align-pre", "align-mid")
        _, lat = S.i2t_accuracy(sysm.denoiser, world, {**cfg, **_sched_cfg(c)}, seed=S.seed_for(cfg, "sample"))
        cos, mse = eval_alignment(lat, [world.vocab.tokenize(x) for x in world.captions], sysm.proj, sysm.llm, world.vocab)
        m = {"avg_cosine": cos, "avg_mse": mse}
        print(f"avg cosine {cos:.6f}  avg mse {mse:.6f}", file=sys.stderr)
    elif args.metric == "i2t":
        acc, _ = S.i2t_accuracy(sysm.denoiser, world, {**cfg, **_sched_cfg(c)}, seed=args.seed)
        m = {"exact_caption_accuracy": acc}
    elif args.metric == "ld":
        lx, ly = eval_bidiffuser_terms(sysm.denoiser, world.x0, world.y0, sysm.sched)
        m = {"L_t2i": lx, "L_i2t": ly, "L_d": lx + cfg["denoiser.alpha"] * ly}
    elif args.metric == "fid":
        n = cfg["eval.n_generate"]
        caps = [world.captions[i % len(world.captions)] for i in range(n)]
        real = np.stack([world.image_of()[x] for x in caps])
        lam = sysm.lam if sysm.adapter is not None else 0.0
        gen = sysm.images_for(caps, seed=args.seed, lam=lam)
        m = {"toy_fid": toy_fid(real, gen), "lambda": lam}
        if lam != 0.0:
            m["toy_fid_no_adapter"] = toy_fid(real, sysm.images_for(caps, seed=args.seed, lam=0.0))
    elif args.metric == "bleu":
        c.require_stage("align-pre")
        hyp = [sysm.image_to_text(x, "caption", seed=args.seed)[0] for x in world.x0]
        m = {"bleu2": bleu(hyp, world.captions),
             "exact_match": float(np.mean([a == b for a, b in zip(hyp, world.captions)]))}
    elif args.metric == "ppl":
        m = {"perplexity": perplexity(sysm.llm, world.captions, world.vocab)}
    return MetricReport("evaluate", m, args.seed, hashes, world.dataset_hash, cfg, {"metric": args.metric}), path


def _sched_cfg(c: ck.Checkpoint) -> dict:
    keys = {"T": "diffusion.T", "beta_start": "diffusion.beta_start", "beta_end": "diffusion.beta_end",
            "text_target": "denoiser.text_target"}
    return {v: c.meta[k] for k, v in keys.items() if k in c.meta}


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_suite
    res = run_suite(verbose=True)
    rep = MetricReport("gradcheck", {f"rel_error.{r.name}": r.rel_error for r in res}, cfg["run.seed"], config=cfg,
                       extra={"failed": [r.name for r in res if not r.ok]})
    out = Path(args.out) if args.out else Path(".")
    return rep, out / "gradcheck.report.json"


COMMANDS = {"gen-data": cmd_gen_data, "pretrain-joint": cmd_pretrain_joint, "finetune-bidiffuser": cmd_finetune,
            "train-adapter": cmd_train_adapter, "align": cmd_align, "train-dialogue": cmd_train_dialogue,
            "generate": cmd_generate, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    saved_dtype = T.get_default_dtype()
    try:
        cfg = C.resolve(args.config, args.set)
        print("# resolved config\n" + "".join(f"# {line}\n" for line in C.dump(cfg).splitlines()), file=sys.stderr, end="")
        rep, path = COMMANDS[args.command](args, cfg)
        _emit(rep, _report_path(args, path))
    except (ck.CheckpointError, ContractError, ConfigError, VocabError, T.ShapeError, FileNotFoundError) as e:
        print(f"mmdiff {args.command}: error: {e}", file=sys.stderr)
        return 1
    finally:
        T.set_default_dtype(saved_dtype)
    if args.command == "gradcheck" and rep.extra["failed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
