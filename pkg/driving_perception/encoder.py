import json
from datetime import date, datetime

import numpy as np
import torch

from driving_perception.models.base_model_ import Model


class JSONEncoder(json.JSONEncoder):
    include_nulls = True

    def default(self, o):
        if isinstance(o, Model):
            dikt = {}
            for attr, value in o.to_dict().items():
                if value is None and not self.include_nulls:
                    continue
                dikt[attr] = value
            return dikt
        if isinstance(o, (datetime, date)):
            return o.isoformat()
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, torch.Tensor):
            return o.detach().cpu().tolist()
        return super(JSONEncoder, self).default(o)


def dump_json(obj, path, indent=2):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(obj, f, cls=JSONEncoder, indent=indent)
    return path
