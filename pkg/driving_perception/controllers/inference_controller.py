import logging

import cv2
import numpy as np
from flask import current_app

from driving_perception.exceptions import ImageReadError

logger = logging.getLogger(__name__)


def decode_upload(file):
    data = np.frombuffer(file.read(), dtype=np.uint8)
    image = cv2.imdecode(data, cv2.IMREAD_COLOR) if data.size else None
    if image is None:
        raise ImageReadError(f"cannot decode uploaded image {getattr(file, 'filename', '')}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def infer(file):  # noqa: E501
    """infer

    Run the loaded model on one uploaded image

    :param file: multipart image upload
    :rtype: dict
    """
    try:
        image = decode_upload(file)
    except ImageReadError as e:
        logger.warning(e)
        return {"error": str(e)}, 400

    try:
        predictor = current_app.predictor
        resized, prediction = predictor.predict_image(image)
        image_id = getattr(file, 'filename', None) or 'upload'
        fractions = {task: float(mask.mean()) for task, mask in prediction.masks.items()}
        return {
            "image_id": image_id,
            "width": int(resized.shape[1]),
            "height": int(resized.shape[0]),
            "detections": [r.to_dict() for r in prediction.records(image_id, min_score=0.25)],
            "drivable_fraction": fractions.get('drivable'),
            "lane_fraction": fractions.get('lane')
        }
    except Exception as e:
        logger.error(f"Inference failed: {e}")
        return {"error": str(e)}, 500


def get_model():  # noqa: E501
    """get_model

    Configuration summary of the served model

    :rtype: dict
    """
    predictor = current_app.predictor
    model_cfg = predictor.config.model
    info = getattr(current_app, 'checkpoint_info', None)
    return {
        "tasks": list(model_cfg.tasks),
        "use_gca": model_cfg.use_gca,
        "input_size": list(model_cfg.input_size),
        "num_queries": model_cfg.num_queries,
        "parameters": predictor.model.parameter_counts(),
        "checkpoint": info.to_dict() if info is not None else {}
    }
