import logging

from driving_perception.helper.MetricsHelper import ConfusionCounts, lane_metrics as compute_lane_metrics
from driving_perception.models.lane_metrics_record import LaneMetricsRecord

logger = logging.getLogger(__name__)


def lane_metrics(body):  # noqa: E501
    """lane_metrics

    Lane IoU and LineAccuracy of a confusion matrix

    :param body: dict with tn, fp, fn, tp
    :rtype: LaneMetricsRecord
    """
    try:
        counts = ConfusionCounts(**{k: int(body[k]) for k in ('tn', 'fp', 'fn', 'tp')})
    except (KeyError, TypeError, ValueError) as e:
        logger.warning(f"Invalid confusion counts {body}: {e}")
        return {"error": f"invalid confusion counts: {e}"}, 400
    if min(counts.tn, counts.fp, counts.fn, counts.tp) < 0:
        return {"error": "confusion counts must be non-negative"}, 400
    return LaneMetricsRecord.from_scores(compute_lane_metrics(counts)).to_dict()
