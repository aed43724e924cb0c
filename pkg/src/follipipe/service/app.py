"""HTTP service wrapping the pipeline.

Each endpoint is a thin adapter: validate the request model, call the
corresponding pipeline function, map the result back. The handlers are
plain functions so the CLI can run them in-process without a server.
"""
from __future__ import annotations

from dataclasses import asdict

from fastapi import FastAPI, HTTPException

from .. import pipeline
from ..slides import SlideParams
from .schemas import (EvalRequest, EvalResponse, GradcheckEntryModel,
                      GradcheckRequest, GradcheckResponse, InferWsiRequest,
                      InferWsiResponse, SynthRequest, SynthResponse,
                      TrainRequest, TrainResponse)


def handle_synth(req: SynthRequest) -> SynthResponse:
    params = SlideParams(
        width=req.width, height=req.height, patch_size=req.patch_size,
        n_follicle_clusters=req.n_follicle_clusters,
        n_colloid_blobs=req.n_colloid_blobs,
        follicular_fraction_target=req.follicular_fraction_target,
        t_follicular=req.t_follicular, t_colloid=req.t_colloid,
        noise_level=req.noise_level,
    )
    result = pipeline.synth_dataset(req.seed, req.n_slides, req.out_dir,
                                    params=params, n_test=req.n_test)
    return SynthResponse(manifest=str(result.manifest), n_train=result.n_train,
                         n_test=result.n_test, slides=result.slides)


def handle_train(req: TrainRequest) -> TrainResponse:
    config = pipeline.TrainConfig(
        manifest=req.manifest, checkpoint=req.checkpoint,
        metrics_csv=req.metrics_csv, seed=req.seed, patch_size=req.patch_size,
        epochs=req.epochs, batch_size=req.batch_size,
        learning_rate=req.learning_rate, loss_mode=req.loss_mode,
        joint_weight=req.joint_weight, ref_patch=req.ref_patch,
    )
    result = pipeline.train(config)
    return TrainResponse(
        checkpoint=str(result.checkpoint), metrics_csv=str(result.metrics_csv),
        steps=result.steps, final_cross_entropy=result.final.cross_entropy,
        final_M=result.final.M, final_adaptive=result.final.adaptive_loss,
        final_cls=result.final.cls_loss, final_joint=result.final.joint,
    )


def handle_eval(req: EvalRequest) -> EvalResponse:
    if not req.oracle and req.checkpoint is None:
        raise ValueError("checkpoint is required unless oracle=true")
    result = pipeline.evaluate(req.checkpoint, req.manifest,
                               patch_size=req.patch_size, role=req.role,
                               oracle=req.oracle, ref_patch=req.ref_patch)
    return EvalResponse(classifier_accuracy=result.classifier_accuracy,
                        n_patches=result.n_patches, **result.criteria)


def handle_infer_wsi(req: InferWsiRequest) -> InferWsiResponse:
    report = pipeline.infer_wsi(
        req.slide, req.checkpoint, req.out_mask, gated=req.gated,
        ref_patch=req.ref_patch, patch_size=req.patch_size, workers=req.workers,
        gt_mask=req.gt_mask, compare_ungated=req.compare_ungated,
        report_path=req.report_out,
    )
    return InferWsiResponse(**asdict(report))


def handle_gradcheck(req: GradcheckRequest) -> GradcheckResponse:
    entries, ok = pipeline.gradcheck_suite(n_seeds=req.seeds, threshold=req.threshold)
    models = [GradcheckEntryModel(name=e.name, max_error=e.max_error) for e in entries]
    return GradcheckResponse(entries=models,
                             max_error=max(e.max_error for e in models), ok=ok)


def create_app() -> FastAPI:
    app = FastAPI(title="follipipe", version="0.1.0")

    def _wrap(handler, req):
        try:
            return handler(req)
        except (ValueError, OSError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/synth", response_model=SynthResponse)
    def synth(req: SynthRequest):
        return _wrap(handle_synth, req)

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest):
        return _wrap(handle_train, req)

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest):
        return _wrap(handle_eval, req)

    @app.post("/infer-wsi", response_model=InferWsiResponse)
    def infer_wsi(req: InferWsiRequest):
        return _wrap(handle_infer_wsi, req)

    @app.post("/gradcheck", response_model=GradcheckResponse)
    def gradcheck(req: GradcheckRequest):
        return _wrap(handle_gradcheck, req)

    return app


app = create_app()
