"""FastAPI service exposing the tracker, generator, evaluator and gradcheck."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from ..actors import build_actor, suggest_camera
from ..evaluation import evaluate_tracking
from ..gradcheck import GradcheckConfig, run_gradcheck
from ..pipeline import (SequenceConfig, frame_latencies, load_sequence_inputs,
                        run_sequence, save_results)
from ..synthetic import (MotionScript, NoiseParams, default_script,
                         generate_synthetic_sequence, save_synthetic_sequence)
from .models import (EvalRequest, EvalResponse, GradcheckRequest,
                     GradcheckResponse, SynthRequest, SynthResponse,
                     TrackRequest, TrackResponse)


def create_app() -> FastAPI:
    app = FastAPI(title="montrack", version="0.1.0")

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/synth", response_model=SynthResponse)
    def synth(req: SynthRequest) -> SynthResponse:
        try:
            actor = build_actor(req.preset, with_skirt=req.with_skirt)
        except (KeyError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        camera = suggest_camera(req.image_size, req.image_size)
        if req.script is not None:
            import json
            script = MotionScript.from_json(json.dumps(req.script))
        else:
            noise = NoiseParams(req.sigma2d, req.sigma3d, req.dropout2d,
                                req.dropout3d, req.image_noise, req.seed)
            script = default_script(req.n_frames, with_cloth=req.with_cloth_motion,
                                    noise=noise)
        seq = generate_synthetic_sequence(actor, camera, script)
        save_synthetic_sequence(req.output_dir, seq)
        return SynthResponse(output_dir=req.output_dir,
                             n_frames=len(seq.frames),
                             n_vertices=actor.mesh.n_vertices,
                             n_triangles=len(actor.mesh.triangles))

    @app.post("/track", response_model=TrackResponse)
    def track(req: TrackRequest) -> TrackResponse:
        try:
            config = SequenceConfig.from_dict(req.config)
            inputs = load_sequence_inputs(req.sequence_dir)
        except (ValueError, FileNotFoundError, TypeError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        result = run_sequence(inputs, config, pipelined=req.pipelined)
        save_results(req.output_dir, result, inputs)
        return TrackResponse(output_dir=req.output_dir,
                             n_frames=len(result.frames),
                             fps=result.fps, pipelined=result.pipelined,
                             latencies=frame_latencies(result.events),
                             timings=result.timings)

    @app.post("/eval", response_model=EvalResponse)
    def eval_(req: EvalRequest) -> EvalResponse:
        try:
            rep = evaluate_tracking(req.sequence_dir, req.result_dir,
                                    req.use_smoothed)
        except FileNotFoundError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        by_class = {k.removeprefix("vertex_error_"): v
                    for k, v in rep.items()
                    if k.startswith("vertex_error_") and not k.endswith("per_frame")}
        return EvalResponse(n_frames=rep["n_frames"],
                            vertex_error=rep["vertex_error"],
                            vertex_error_by_class=by_class,
                            joint_error=rep["joint_error"],
                            mean_iou=rep["mean_iou"])

    @app.post("/gradcheck", response_model=GradcheckResponse)
    def gradcheck(req: GradcheckRequest) -> GradcheckResponse:
        rep = run_gradcheck(GradcheckConfig(req.n_configs, req.step,
                                            req.tolerance, req.seed,
                                            req.image_size))
        return GradcheckResponse(passed=rep.passed,
                                 max_rel_error=rep.max_rel_error,
                                 elapsed=rep.elapsed, n_configs=rep.n_configs,
                                 worst_by_block=rep.worst_by_block())

    return app


app = create_app()
