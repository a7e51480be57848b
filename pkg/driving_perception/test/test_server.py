import cv2
import numpy as np
import pytest

from driving_perception.server import create_app


@pytest.fixture(scope="module")
def client(tiny_config_file):
    app = create_app(config_path=tiny_config_file, device='cpu')
    return app.test_client()


def png_bytes(height=48, width=80):
    image = np.zeros((height, width, 3), dtype=np.uint8)
    image[height // 2:, :] = (90, 90, 90)
    ok, buffer = cv2.imencode('.png', image)
    assert ok
    return buffer.tobytes()


def test_lane_metrics(client):
    response = client.post('/lane-metrics', json={'tn': 898453, 'fp': 14738, 'fn': 2362, 'tp': 6047})
    assert response.status_code == 200
    body = response.json()
    assert round(body['iou'], 4) == 0.2612
    assert round(body['line_accuracy'], 4) == 0.7191
    assert body['iou_defined'] and body['accuracy_defined']


def test_lane_metrics_without_lane_pixels(client):
    response = client.post('/lane-metrics', json={'tn': 100, 'fp': 0, 'fn': 0, 'tp': 0})
    assert response.status_code == 200
    assert response.json()['iou_defined'] is False


def test_lane_metrics_rejects_negative_counts(client):
    response = client.post('/lane-metrics', json={'tn': 1, 'fp': -1, 'fn': 0, 'tp': 0})
    assert response.status_code == 400


def test_model_summary(client):
    response = client.get('/model')
    assert response.status_code == 200
    body = response.json()
    assert body['tasks'] == ['detection', 'drivable', 'lane']
    assert body['input_size'] == [64, 64]
    assert body['num_queries'] == 10
    assert body['checkpoint'] == {}


def test_infer_upload(client):
    response = client.post('/infer', files={'file': ('road.png', png_bytes(), 'image/png')})
    assert response.status_code == 200
    body = response.json()
    assert body['image_id'] == 'road.png'
    assert (body['width'], body['height']) == (64, 64)
    assert isinstance(body['detections'], list)
    assert 0.0 <= body['drivable_fraction'] <= 1.0


def test_infer_rejects_garbage(client):
    response = client.post('/infer', files={'file': ('noise.png', b'not an image', 'image/png')})
    assert response.status_code == 400
