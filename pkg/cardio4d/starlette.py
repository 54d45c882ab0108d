"""Starlette implementation of the prediction service.

Requests to :py:`POST /predict` and :py:`POST /ejection-fraction` carry a single VOL4
intensity volume as the request body.
"""

import logging
import traceback
from datetime import datetime
from typing import TYPE_CHECKING

import numpy as np
from starlette.applications import Starlette
from starlette.concurrency import run_in_threadpool
from starlette.middleware import Middleware
from starlette.middleware.base import BaseHTTPMiddleware
from starlette.middleware.gzip import GZipMiddleware
from starlette.responses import HTMLResponse, JSONResponse, Response
from starlette.routing import Route

from .common import Cardio4DError
from .config import ServiceConfig
from .data import VolumeFile, decode_volume, encode_volume, sequence_from_files
from .metrics import ejection_fraction
from .model import predict_labels

if TYPE_CHECKING:
    import starlette.requests

    import cardio4d.data

log = logging.getLogger(__name__)


class CustomHeaderMiddleware(BaseHTTPMiddleware):
    """Middleware that sets the ``Server`` and ``Prepared`` HTTP headers."""

    def __init__(self, app, *, server: str):
        super().__init__(app)
        self.server_header = server

    async def dispatch(self, request, call_next):
        response = await call_next(request)

        response.headers["Server"] = self.server_header
        response.headers["Prepared"] = datetime.now().isoformat()

        return response


def gen_error_response(code: int, text: str) -> JSONResponse:
    """Return a JSON error response with HTTP status `code`."""
    return JSONResponse({"error": {"code": code, "message": text}}, status_code=code)


def build_app(**config_kwargs):
    """Construct and return a :class:`.Starlette` prediction app.

    Keyword arguments are passed to :class:`.ServiceConfig`.
    """
    config = ServiceConfig(**config_kwargs)

    routes = [
        Route("/", index),
        Route("/model", model_info),
        Route("/predict", predict, methods=["POST"]),
        Route("/ejection-fraction", ejection_fraction_endpoint, methods=["POST"]),
    ]

    app = Starlette(
        debug=config.debug,
        routes=routes,
        # Anything else is user error in constructing a valid URL
        exception_handlers={404: handle_exception},
        middleware=[
            Middleware(CustomHeaderMiddleware, server=config.version_string),
            Middleware(GZipMiddleware, minimum_size=1000),
        ],
    )

    # Store configuration on the app instance
    app.state.config = config

    if config.model is None:
        log.warning("No model configured; prediction endpoints will return 503")
    else:
        log.info(f"Serving {config.model!r}")

    return app


async def handle_exception(request: "starlette.requests.Request", exc):
    """Handle errors."""
    code = exc.status_code
    text = "\n\n".join([repr(exc)] + traceback.format_exception(exc))

    if code == 404:
        # 404 indicates a routing failure, e.g. the user gave a malformed URL
        text = f"{request.url} is not a valid path"
        code = 400

    return gen_error_response(code, text)


async def index(request: "starlette.requests.Request"):
    """Return a bare-bones HTML info page on from the base URL."""
    return HTMLResponse(
        "<p>This is a cardio4d cardiac segmentation server. "
        "POST a VOL4 volume to <code>/predict</code> or "
        "<code>/ejection-fraction</code>.</p>"
    )


async def model_info(request: "starlette.requests.Request"):
    config: ServiceConfig = request.app.state.config
    if config.model is None:
        return gen_error_response(503, "No model configured")

    return JSONResponse(
        dict(
            config=config.model.config.to_dict(),
            parameters=config.model.params.count(),
            digest=config.model.digest(),
            version=config.version_string,
        )
    )


async def _read_sequence(
    request: "starlette.requests.Request",
) -> "cardio4d.data.Volume4DSequence":
    body = await request.body()
    vf = decode_volume(body, "request body")
    return sequence_from_files("request", vf)


async def _labels(request: "starlette.requests.Request"):
    """Return (sequence, labels) or an error response."""
    config: ServiceConfig = request.app.state.config
    if config.model is None:
        return None, gen_error_response(503, "No model configured")

    try:
        seq = await _read_sequence(request)
        labels = await run_in_threadpool(predict_labels, config.model, seq, config.overlap)
    except (Cardio4DError, ValueError) as e:
        log.info(f"Rejected request: {type(e).__name__}: {e}")
        return None, gen_error_response(400, f"{type(e).__name__}: {e}")

    return (seq, labels), None


async def predict(request: "starlette.requests.Request"):
    """Return the predicted label volume for a VOL4 intensity volume."""
    result, error = await _labels(request)
    if error:
        return error

    seq, labels = result
    vf = VolumeFile(labels, seq.spacing, seq.frame_ms, np.ones(labels.shape[-1], bool))
    return Response(encode_volume(vf), media_type="application/octet-stream")


async def ejection_fraction_endpoint(request: "starlette.requests.Request"):
    """Return the ejection fraction computed from predicted labels.

    If no LV is predicted in any frame, ``ef`` and the other fields are :obj:`null`.
    """
    result, error = await _labels(request)
    if error:
        return error

    seq, labels = result
    try:
        ef = ejection_fraction(labels, seq.voxel_volume_ml)
    except Cardio4DError as e:
        log.info(f"No ejection fraction: {e}")
        return JSONResponse(
            dict(ef=None, reduced=None, ed_frame=None, es_frame=None, volumes_ml=None)
        )

    return JSONResponse(
        dict(
            ef=ef.ef,
            reduced=ef.reduced,
            ed_frame=ef.ed_frame,
            es_frame=ef.es_frame,
            volumes_ml=ef.volumes_ml,
        )
    )
