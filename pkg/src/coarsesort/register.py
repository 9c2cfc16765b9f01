"""Cross-camera registration: scale-space keypoints, ratio-test matching,
RANSAC homographies and inverse-mapped warping into the UV frame."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, maximum_filter, minimum_filter
from scipy.spatial.distance import cdist

from .errors import InvalidInputError, RegistrationFailed
from .cube import assemble_cube, bilinear_sample, normalize_image

logger = logging.getLogger(__name__)

REFERENCE_CAMERA = "UV"


@dataclass(frozen=True)
class SiftParams:
    sigma: float = 1.6
    num_intervals: int = 3
    assumed_blur: float = 0.5
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    border: int = 5
    max_keypoints: int | None = 1500
    min_size: int = 32


@dataclass
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    descriptor: np.ndarray
    response: float = 0.0
    octave: int = 0
    layer: int = 0


@dataclass(frozen=True)
class MatchPair:
    src_idx: int
    dst_idx: int
    distance: float
    ratio: float


@dataclass
class Homography:
    h: np.ndarray  # 3×3, h[2, 2] == 1
    inlier_count: int = 0
    rms_reproj_px: float = 0.0
    inlier_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).reshape(3, 3)
        if abs(h[2, 2]) < 1e-12:
            raise RegistrationFailed("homography cannot be normalised (h33 ~ 0)")
        h = h / h[2, 2]
        if abs(np.linalg.det(h)) <= 1e-12:
            raise RegistrationFailed("homography is singular")
        self.h = h

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3), 0, 0.0)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return apply_homography(self.h, pts)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def to_json(self) -> dict:
        return {
            "h": [float(v) for v in self.h.ravel()],
            "inliers": int(self.inlier_count),
            "rms_px": float(self.rms_reproj_px),
        }


def apply_homography(h: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    hom = np.c_[pts, np.ones(len(pts))] @ np.asarray(h).T
    with np.errstate(divide="ignore", invalid="ignore"):
        return hom[:, :2] / hom[:, 2:3]


# --------------------------------------------------------------------------
# keypoints


def _build_pyramid(image: np.ndarray, p: SiftParams):
    s = p.num_intervals
    k = 2.0 ** (1.0 / s)
    base = gaussian_filter(image, np.sqrt(max(p.sigma**2 - p.assumed_blur**2, 0.01)), mode="nearest")
    incr = [p.sigma * k ** (i - 1) * np.sqrt(k**2 - 1) for i in range(1, s + 3)]
    n_oct = max(1, int(np.log2(min(image.shape))) - 3)
    gauss, dogs = [], []
    for _ in range(n_oct):
        levels = [base]
        for sig in incr:
            levels.append(gaussian_filter(levels[-1], sig, mode="nearest"))
        g = np.stack(levels)
        gauss.append(g)
        dogs.append(g[1:] - g[:-1])
        base = g[s][::2, ::2]
    return gauss, dogs


def _refine(dog, layer, r, c, p: SiftParams):
    """Quadratic sub-pixel fit around a DoG extremum; None if rejected."""
    s = p.num_intervals
    n_lay, h, w = dog.shape
    for _ in range(5):
        cube = dog[layer - 1 : layer + 2, r - 1 : r + 2, c - 1 : c + 2]
        g = 0.5 * np.array(
            [cube[1, 1, 2] - cube[1, 1, 0], cube[1, 2, 1] - cube[1, 0, 1], cube[2, 1, 1] - cube[0, 1, 1]]
        )
        v = cube[1, 1, 1]
        dxx = cube[1, 1, 2] - 2 * v + cube[1, 1, 0]
        dyy = cube[1, 2, 1] - 2 * v + cube[1, 0, 1]
        dss = cube[2, 1, 1] - 2 * v + cube[0, 1, 1]
        dxy = 0.25 * (cube[1, 2, 2] - cube[1, 2, 0] - cube[1, 0, 2] + cube[1, 0, 0])
        dxs = 0.25 * (cube[2, 1, 2] - cube[2, 1, 0] - cube[0, 1, 2] + cube[0, 1, 0])
        dys = 0.25 * (cube[2, 2, 1] - cube[2, 0, 1] - cube[0, 2, 1] + cube[0, 0, 1])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            off = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(off) < 0.5):
            break
        c += int(round(off[0]))
        r += int(round(off[1]))
        layer += int(round(off[2]))
        if not (1 <= layer <= s and p.border <= r < h - p.border and p.border <= c < w - p.border):
            return None
    else:
        return None
    contrast = v + 0.5 * g @ off
    if abs(contrast) < p.contrast_threshold:
        return None
    tr = dxx + dyy
    det = dxx * dyy - dxy**2
    if det <= 0 or tr * tr * p.edge_ratio >= (p.edge_ratio + 1) ** 2 * det:
        return None
    return layer, r, c, off, float(contrast)


def _gradients(img: np.ndarray):
    gy, gx = np.gradient(img)
    return np.hypot(gx, gy), np.arctan2(gy, gx)


def _orientations(mag, ang, r, c, sigma_oct, n_bins=36, peak_ratio=0.8):
    h, w = mag.shape
    sig = 1.5 * sigma_oct
    rad = int(round(3 * sig))
    r0, r1 = max(r - rad, 1), min(r + rad + 1, h - 1)
    c0, c1 = max(c - rad, 1), min(c + rad + 1, w - 1)
    yy, xx = np.mgrid[r0:r1, c0:c1]
    wgt = np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * sig * sig))
    bins = np.round(ang[r0:r1, c0:c1] * n_bins / (2 * np.pi)).astype(int) % n_bins
    hist = np.bincount(bins.ravel(), (wgt * mag[r0:r1, c0:c1]).ravel(), minlength=n_bins)
    hist = (
        6 * hist + 4 * (np.roll(hist, 1) + np.roll(hist, -1)) + np.roll(hist, 2) + np.roll(hist, -2)
    ) / 16.0
    hmax = hist.max()
    if hmax <= 0:
        return []
    left, right = np.roll(hist, 1), np.roll(hist, -1)
    out = []
    for i in np.flatnonzero((hist > left) & (hist > right) & (hist >= peak_ratio * hmax)):
        denom = left[i] - 2 * hist[i] + right[i]
        shift = 0.5 * (left[i] - right[i]) / denom if denom != 0 else 0.0
        theta = (i + shift) * 2 * np.pi / n_bins
        out.append(float((theta + np.pi) % (2 * np.pi) - np.pi))
    return out


def _descriptor(mag, ang, r, c, sigma_oct, orientation, d=4, n=8):
    h, w = mag.shape
    hist_w = 3.0 * sigma_oct
    rad = int(round(hist_w * np.sqrt(2) * (d + 1) * 0.5))
    rad = min(rad, int(np.hypot(h, w)))
    r0, r1 = max(r - rad, 0), min(r + rad + 1, h)
    c0, c1 = max(c - rad, 0), min(c + rad + 1, w)
    yy, xx = np.mgrid[r0:r1, c0:c1]
    dy, dx = (yy - r).ravel(), (xx - c).ravel()
    cos_t, sin_t = np.cos(orientation), np.sin(orientation)
    rx = (cos_t * dx + sin_t * dy) / hist_w
    ry = (-sin_t * dx + cos_t * dy) / hist_w
    rbin = ry + d / 2 - 0.5
    cbin = rx + d / 2 - 0.5
    keep = (rbin > -1) & (rbin < d) & (cbin > -1) & (cbin < d)
    rbin, cbin = rbin[keep], cbin[keep]
    wgt = np.exp(-(rx[keep] ** 2 + ry[keep] ** 2) / (2 * (0.5 * d) ** 2))
    m = mag[r0:r1, c0:c1].ravel()[keep] * wgt
    obin = ((ang[r0:r1, c0:c1].ravel()[keep] - orientation) % (2 * np.pi)) * n / (2 * np.pi)
    r_f, c_f, o_f = np.floor(rbin).astype(int), np.floor(cbin).astype(int), np.floor(obin).astype(int)
    dr, dc, do = rbin - r_f, cbin - c_f, obin - o_f
    hist = np.zeros((d + 2, d + 2, n))
    for ir, wr in ((0, 1 - dr), (1, dr)):
        for ic, wc in ((0, 1 - dc), (1, dc)):
            for io, wo in ((0, 1 - do), (1, do)):
                np.add.at(hist, (r_f + 1 + ir, c_f + 1 + ic, (o_f + io) % n), m * wr * wc * wo)
    vec = hist[1:-1, 1:-1].ravel()
    norm = np.linalg.norm(vec)
    if norm == 0:
        return None
    vec = np.minimum(vec / norm, 0.2)
    norm = np.linalg.norm(vec)
    return vec / norm


def detect_keypoints(image: np.ndarray, params: SiftParams | None = None) -> list[Keypoint]:
    """Difference-of-Gaussians keypoints with orientation and 128-d descriptor.

    ``image`` is a single-channel image already normalised to [0, 1].
    Coordinates are (x = column, y = row) in input pixels.
    """
    p = params or SiftParams()
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise InvalidInputError("detect_keypoints expects a single-channel image")
    if min(img.shape) < p.min_size:
        raise InvalidInputError(f"image {img.shape} smaller than {p.min_size} px")
    gauss, dogs = _build_pyramid(img, p)
    s = p.num_intervals
    pre_thr = 0.5 * p.contrast_threshold / s
    found = []
    for o, dog in enumerate(dogs):
        _, h, w = dog.shape
        if min(h, w) <= 2 * p.border + 2:
            break
        mx = maximum_filter(dog, size=3, mode="nearest")
        mn = minimum_filter(dog, size=3, mode="nearest")
        cand = ((dog == mx) & (dog > pre_thr)) | ((dog == mn) & (dog < -pre_thr))
        cand[0] = cand[-1] = False
        cand[:, : p.border] = cand[:, h - p.border :] = False
        cand[:, :, : p.border] = cand[:, :, w - p.border :] = False
        grads = {}
        for layer, r, c in zip(*np.nonzero(cand)):
            res = _refine(dog, int(layer), int(r), int(c), p)
            if res is None:
                continue
            lay, rr, cc, off, contrast = res
            sigma_oct = p.sigma * 2 ** ((lay + off[2]) / s)
            if lay not in grads:
                grads[lay] = _gradients(gauss[o][lay])
            mag, ang = grads[lay]
            for theta in _orientations(mag, ang, rr, cc, sigma_oct):
                desc = _descriptor(mag, ang, rr, cc, sigma_oct, theta)
                if desc is None:
                    continue
                found.append(
                    Keypoint(
                        x=float((cc + off[0]) * 2**o),
                        y=float((rr + off[1]) * 2**o),
                        scale=float(sigma_oct * 2**o),
                        orientation=theta,
                        descriptor=desc,
                        response=abs(contrast),
                        octave=o,
                        layer=lay,
                    )
                )
    found.sort(key=lambda k: (-k.response, k.y, k.x, k.orientation))
    if p.max_keypoints is not None:
        found = found[: p.max_keypoints]
    logger.debug("detected %d keypoints", len(found))
    return found


# --------------------------------------------------------------------------
# matching


def _descriptor_matrix(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        return np.atleast_2d(items.astype(float))
    return np.array([k.descriptor if isinstance(k, Keypoint) else k for k in items], dtype=float)


def match_descriptors(src, dst, ratio_threshold: float = 0.75) -> list[MatchPair]:
    """Exact 2-NN matching with a nearest/second-nearest ratio test and a symmetric cross-check."""
    a, b = _descriptor_matrix(src), _descriptor_matrix(dst)
    if len(a) == 0:
        raise InvalidInputError("no source descriptors")
    if len(b) < 2:
        raise InvalidInputError("ratio test needs at least two destination descriptors")
    if not 0 < ratio_threshold < 1:
        raise InvalidInputError("ratio_threshold must be in (0, 1)")
    dist = cdist(a, b)
    order = np.argsort(dist, axis=1, kind="stable")
    best, second = order[:, 0], order[:, 1]
    rows = np.arange(len(a))
    d1, d2 = dist[rows, best], dist[rows, second]
    back = np.argmin(dist, axis=0)
    out = []
    for i in rows:
        ratio = d1[i] / d2[i] if d2[i] > 0 else 1.0
        if ratio < ratio_threshold and back[best[i]] == i:
            out.append(MatchPair(int(i), int(best[i]), float(d1[i]), float(ratio)))
    return out


# --------------------------------------------------------------------------
# homography estimation


def _hartley(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(pts - centroid, axis=1))
    scale = np.sqrt(2) / mean_dist if mean_dist > 0 else 1.0
    return np.array([[scale, 0, -scale * centroid[0]], [0, scale, -scale * centroid[1]], [0, 0, 1.0]])


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalised direct linear transform (least squares for > 4 points)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    t1, t2 = _hartley(src), _hartley(dst)
    s = apply_homography(t1, src)
    d = apply_homography(t2, dst)
    n = len(s)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = -s
    a[0::2, 2] = -1
    a[0::2, 6:8] = s * d[:, :1]
    a[0::2, 8] = d[:, 0]
    a[1::2, 3:5] = -s
    a[1::2, 5] = -1
    a[1::2, 6:8] = s * d[:, 1:2]
    a[1::2, 8] = d[:, 1]
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t2) @ hn @ t1
    return h / h[2, 2]


def symmetric_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """max(forward, backward) transfer distance in pixels per correspondence."""
    fwd = np.linalg.norm(apply_homography(h, src) - dst, axis=1)
    bwd = np.linalg.norm(apply_homography(np.linalg.inv(h), dst) - src, axis=1)
    err = np.maximum(fwd, bwd)
    return np.where(np.isfinite(err), err, np.inf)


def _degenerate(pts: np.ndarray) -> bool:
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1.0)
    for i in range(4):
        p = np.delete(pts, i, axis=0)
        u, v = p[1] - p[0], p[2] - p[0]
        area = abs(u[0] * v[1] - u[1] * v[0])
        if area < 1e-6 * scale * scale:
            return True
    return False


def estimate_homography_ransac(
    matches,
    points_src,
    points_dst,
    thresh_px: float = 3.0,
    max_iters: int = 2000,
    seed: int = 0,
    confidence: float = 0.999,
) -> Homography:
    """Robust homography mapping ``points_src`` onto ``points_dst``.

    ``matches`` selects correspondences (MatchPair list indexing into the two
    point arrays); pass None when the arrays are already paired row by row.
    Iterations stop early once ``confidence`` is reached for the current
    inlier ratio; the result is deterministic for a given seed.
    """
    ps, pd = np.asarray(points_src, dtype=float), np.asarray(points_dst, dtype=float)
    if matches is not None:
        ps = ps[[m.src_idx for m in matches]]
        pd = pd[[m.dst_idx for m in matches]]
    n = len(ps)
    if n < 4:
        raise InvalidInputError(f"need at least 4 matches, got {n}")
    if thresh_px <= 0:
        raise InvalidInputError("thresh_px must be positive")
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, 0
    needed = max_iters
    it = 0
    while it < min(max_iters, needed):
        it += 1
        idx = rng.choice(n, 4, replace=False)
        if _degenerate(ps[idx]) or _degenerate(pd[idx]):
            continue
        h = dlt_homography(ps[idx], pd[idx])
        if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) < 1e-12:
            continue
        mask = symmetric_error(h, ps, pd) < thresh_px
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
            w = count / n
            denom = np.log(max(1 - w**4, 1e-12))
            needed = int(np.ceil(np.log(1 - confidence) / denom)) if w < 1 else 0
    if best_mask is None or best_count < 4:
        raise RegistrationFailed("no consensus set of four or more correspondences")
    mask = best_mask
    h = dlt_homography(ps[mask], pd[mask])
    for _ in range(10):
        new_mask = symmetric_error(h, ps, pd) < thresh_px
        if new_mask.sum() < 4:
            break
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
        h = dlt_homography(ps[mask], pd[mask])
    final = symmetric_error(h, ps, pd) < thresh_px
    if final.sum() < 4:
        raise RegistrationFailed("refined model lost its consensus set")
    resid = np.linalg.norm(apply_homography(h, ps[final]) - pd[final], axis=1)
    return Homography(h, int(final.sum()), float(np.sqrt(np.mean(resid**2))), final)


# --------------------------------------------------------------------------
# warping


def warp_image(image: np.ndarray, homography, out_w: int, out_h: int):
    """Inverse-mapped bilinear warp.

    ``homography`` maps source pixels to destination pixels. Returns the
    warped image and a validity mask; destination pixels whose preimage lies
    outside the source are 0 and False.
    """
    h = homography.h if isinstance(homography, Homography) else np.asarray(homography, dtype=float)
    if abs(np.linalg.det(h)) <= 1e-12:
        raise InvalidInputError("homography is not invertible")
    hinv = np.linalg.inv(h)
    img = np.asarray(image, dtype=float)
    src_h, src_w = img.shape[:2]
    gx, gy = np.meshgrid(np.arange(out_w, dtype=float), np.arange(out_h, dtype=float))
    wz = hinv[2, 0] * gx + hinv[2, 1] * gy + hinv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (hinv[0, 0] * gx + hinv[0, 1] * gy + hinv[0, 2]) / wz
        sy = (hinv[1, 0] * gx + hinv[1, 1] * gy + hinv[1, 2]) / wz
    valid = (wz > 0) & (sx >= 0) & (sx <= src_w - 1) & (sy >= 0) & (sy <= src_h - 1)
    sx = np.where(valid, sx, 0.0)
    sy = np.where(valid, sy, 0.0)
    out = bilinear_sample(img, sx, sy)
    if out.ndim == 3:
        out[~valid] = 0.0
    else:
        out = np.where(valid, out, 0.0)
    return out, valid


# --------------------------------------------------------------------------
# series registration


@dataclass
class RegistrationResult:
    homographies: dict[str, Homography]
    stats: dict[str, dict]
    failed: dict[str, str] = field(default_factory=dict)
    series_id: str = ""

    def to_json(self) -> dict:
        out = {cam: h.to_json() for cam, h in self.homographies.items()}
        for cam, msg in self.failed.items():
            out[cam] = {"error": msg}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, d: dict, series_id: str = "") -> "RegistrationResult":
        homs, failed = {}, {}
        for cam, e in d.items():
            if "error" in e:
                failed[cam] = e["error"]
            else:
                homs[cam] = Homography(np.array(e["h"]).reshape(3, 3), e["inliers"], e["rms_px"])
        return cls(homs, {}, failed, series_id)


def register_pair(src_img, dst_img, params=None, ratio=0.75, thresh_px=3.0, seed=0, dst_keypoints=None):
    """Homography mapping ``src_img`` pixels onto ``dst_img`` pixels."""
    kp_dst = dst_keypoints if dst_keypoints is not None else detect_keypoints(normalize_image(dst_img), params)
    kp_src = detect_keypoints(normalize_image(src_img), params)
    if len(kp_src) < 4 or len(kp_dst) < 4:
        raise RegistrationFailed(f"too few keypoints ({len(kp_src)} vs {len(kp_dst)})")
    matches = match_descriptors(kp_src, kp_dst, ratio)
    if len(matches) < 4:
        raise RegistrationFailed(f"only {len(matches)} matches survived the ratio test")
    ps = np.array([[k.x, k.y] for k in kp_src])
    pd = np.array([[k.x, k.y] for k in kp_dst])
    hom = estimate_homography_ransac(matches, ps, pd, thresh_px=thresh_px, seed=seed)
    stats = {"keypoints": len(kp_src), "matches": len(matches), "inliers": hom.inlier_count}
    return hom, stats


def register_series(vis_frames: dict, params: SiftParams | None = None, ratio=0.75,
                    thresh_px=3.0, seed=0, series_id="", strict=False) -> RegistrationResult:
    """Per-camera homographies into the UV frame from unfiltered VIS captures.

    Failures are collected per camera in ``result.failed``; with
    ``strict=True`` the first failure raises RegistrationFailed.
    """
    if REFERENCE_CAMERA not in vis_frames:
        raise InvalidInputError("series needs a UV reference frame")
    kp_ref = detect_keypoints(normalize_image(vis_frames[REFERENCE_CAMERA]), params)
    homs = {REFERENCE_CAMERA: Homography.identity()}
    stats = {REFERENCE_CAMERA: {"keypoints": len(kp_ref), "matches": 0, "inliers": 0}}
    failed = {}
    for cam in sorted(vis_frames):
        if cam == REFERENCE_CAMERA:
            continue
        try:
            if len(kp_ref) < 4:
                raise RegistrationFailed("reference frame has too few keypoints")
            homs[cam], stats[cam] = register_pair(
                vis_frames[cam], vis_frames[REFERENCE_CAMERA], params, ratio, thresh_px, seed, kp_ref
            )
        except RegistrationFailed as exc:
            if strict:
                raise RegistrationFailed(f"{cam}: {exc}") from exc
            logger.warning("registration failed for %s: %s", cam, exc)
            failed[cam] = str(exc)
    return RegistrationResult(homs, stats, failed, series_id)


def build_cube(captures, result: RegistrationResult, out_w: int, out_h: int):
    """Warp every capture of a series with its camera's homography and stack.

    ``captures`` is a list of RawCapture covering all 13 filters.
    """
    planes, masks = [], []
    for cap in sorted(captures, key=lambda c: c.band.filter_index):
        cam = cap.band.camera
        if cam not in result.homographies:
            raise RegistrationFailed(f"no homography for camera {cam}")
        warped, valid = warp_image(cap.image, result.homographies[cam], out_w, out_h)
        for ch in range(warped.shape[2]):
            planes.append(warped[:, :, ch])
            masks.append(valid)
    return assemble_cube(planes, masks=masks)


# --------------------------------------------------------------------------
# synthetic views


def similarity(tx=0.0, ty=0.0, angle_deg=0.0, scale=1.0, center=(0.0, 0.0)) -> np.ndarray:
    """3×3 similarity about ``center`` followed by translation (tx, ty)."""
    a = np.deg2rad(angle_deg)
    cx, cy = center
    r = scale * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    h = np.eye(3)
    h[:2, :2] = r
    h[:2, 2] = np.array([cx, cy]) - r @ np.array([cx, cy]) + np.array([tx, ty])
    return h


def synthetic_texture(size: int, seed: int = 0, density: float = 1 / 150.0) -> np.ndarray:
    """Blob texture on a canvas of ``size``×``size``, values in [0, 1]."""
    rng = np.random.default_rng(seed)
    canvas = np.zeros((size, size))
    for sig in (2.0, 3.5, 6.0):
        n = int(size * size * density / sig)
        field = np.zeros((size, size))
        r = rng.integers(0, size, n)
        c = rng.integers(0, size, n)
        np.add.at(field, (r, c), rng.choice([-1.0, 1.0], n) * rng.uniform(0.5, 1.0, n))
        canvas += gaussian_filter(field, sig, mode="wrap") * sig * sig * 2 * np.pi
    canvas = gaussian_filter(canvas, 0.7, mode="wrap")
    lo, hi = np.percentile(canvas, [2, 98])
    return np.clip((canvas - lo) / (hi - lo), 0.0, 1.0)


def render_view(texture: np.ndarray, to_reference: np.ndarray, size: int, offset=(0.0, 0.0)) -> np.ndarray:
    """Image seen by a camera whose pixels map to reference pixels by ``to_reference``.

    The reference view is the texture window starting at ``offset``.
    """
    gx, gy = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
    pts = apply_homography(to_reference, np.c_[gx.ravel(), gy.ravel()])
    xs = pts[:, 0] + offset[0]
    ys = pts[:, 1] + offset[1]
    vals = map_coordinates(texture, [ys, xs], order=3, mode="reflect")
    return np.clip(vals.reshape(size, size), 0.0, 1.0)


def synthetic_series(size: int = 256, seed: int = 0, cube=None, max_shift: float = 20.0,
                     max_angle: float = 6.0, scale_range=(0.9, 1.1)):
    """A 13-filter exposure series with known per-camera misalignment.

    Returns (vis_frames, captures, truth) where ``truth`` maps each camera
    to the true camera-to-UV homography. Filtered captures show ``cube``
    channels (upsampled to ``size``) modulated by the shared texture; with
    ``cube=None`` they show the texture alone.
    """
    from .cube import RawCapture, canonical_band_table

    rng = np.random.default_rng(seed)
    texture = synthetic_texture(size + 64, seed)
    center = (size / 2.0, size / 2.0)
    truth = {REFERENCE_CAMERA: np.eye(3)}
    for cam in ("VISNIR", "SWIR"):
        truth[cam] = similarity(*rng.uniform(-max_shift, max_shift, 2), rng.uniform(-max_angle, max_angle),
                                rng.uniform(*scale_range), center)
    offset = (32.0, 32.0)
    vis_frames = {cam: render_view(texture, h, size, offset) for cam, h in truth.items()}

    if cube is not None:
        zoom = size / np.array(cube.channels.shape[:2])
        from scipy.ndimage import zoom as nd_zoom

        chans = np.stack([nd_zoom(cube.channels[:, :, c], zoom, order=0) for c in range(cube.channels.shape[2])], -1)
        chans = np.clip(chans, 0.0, None)
    else:
        chans = None
    captures = []
    ch = 0
    for band in canonical_band_table():
        planes = []
        for _ in range(band.channel_count):
            base = texture[32 : 32 + size, 32 : 32 + size] if chans is None else (
                chans[:, :, ch] * (0.8 + 0.2 * texture[32 : 32 + size, 32 : 32 + size]))
            # reference-frame content seen through this camera's misalignment
            canvas = np.pad(base, 32, mode="reflect")
            planes.append(render_view(canvas, truth[band.camera], size, offset) if chans is None else
                          np.clip(_render_unclipped(canvas, truth[band.camera], size, offset), 0, None))
            ch += 1
        img = np.stack(planes, -1) if len(planes) > 1 else planes[0]
        captures.append(RawCapture(img, band, band.exposure_s, 0.0, f"synthetic-{seed}"))
    return vis_frames, captures, truth


def _render_unclipped(canvas, to_reference, size, offset):
    gx, gy = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
    pts = apply_homography(to_reference, np.c_[gx.ravel(), gy.ravel()])
    vals = map_coordinates(canvas, [pts[:, 1] + offset[1], pts[:, 0] + offset[0]], order=1, mode="nearest")
    return vals.reshape(size, size)
