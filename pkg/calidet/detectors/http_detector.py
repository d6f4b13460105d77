import json
import logging
import time
import urllib.error
import urllib.request

from calidet.core.detection import DetectionSet
from calidet.core.errors import DetectorError

from .detector import Detector

logger = logging.getLogger(__name__)


class HttpDetector(Detector):
    """
    Client for an external detector. POSTs {"image_id", "width", "height", "edge"}
    as JSON and expects a DetectionSet document back.
    """

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 2, backoff: float = 0.5, name="Http"):
        super().__init__(name)
        if retries < 0:
            raise ValueError(f"Retry count must be non-negative, got {retries}.")
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _post(self, payload: bytes) -> dict:
        request = urllib.request.Request(
            self.url, data=payload, headers={"Content-Type": "application/json"}, method="POST"
        )
        with urllib.request.urlopen(request, timeout=self.timeout) as response:
            return json.loads(response.read())

    def detect(self, image, edge):
        payload = json.dumps(
            {"image_id": image.image_id, "width": image.width, "height": image.height, "edge": edge.to_dict()}
        ).encode()
        last_error = None
        for attempt in range(self.retries + 1):
            try:
                document = self._post(payload)
                result = DetectionSet.from_dict(document)
            except (urllib.error.URLError, TimeoutError, ValueError, KeyError, TypeError) as exc:
                last_error = exc
                logger.warning(
                    "Detector request for image %d failed (attempt %d): %s", image.image_id, attempt + 1, exc
                )
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
                continue
            if result.image_id != image.image_id:
                raise DetectorError(f"Detector answered for image {result.image_id}, asked for {image.image_id}.")
            return result.validate(edge.k)
        raise DetectorError(f"Detector at {self.url} failed for image {image.image_id}: {last_error}")
