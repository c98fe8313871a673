import logging
from typing import List, Tuple

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from classes.exceptions import DegenerateNeighborhoodError, InvalidArgumentError
from classes.point_cloud import Cloud, CurvatureConfig, PLANAR_CLUSTER, REMOVED_CLUSTER

logger = logging.getLogger(__name__)

EIGEN_ZERO = 1e-12
MAX_FIT_CONDITION = 1e12


class CloudProcessor:
    """
    Neighbour search, normal and curvature estimation, curvature clustering and voxel downsampling for point
    clouds. The processor is stateless apart from its diagnostics counters.
    """

    def __init__(self, config: CurvatureConfig = None):
        self.config = (config or CurvatureConfig()).validate()
        self.curvature_unavailable_count = 0
        self.degenerate_normal_count = 0

    def knn_search(self, cloud: Cloud, query, k: int) -> List[Tuple[int, float]]:
        """
        Exact k-nearest-neighbour query.

        Parameters:
        :param cloud: Cloud to search.
        :param query: 3-vector query position, in the cloud's frame.
        :param k: Number of neighbours requested.

        Returns:
        :return: Up to k (index, distance) tuples sorted by ascending distance; empty for an empty cloud.
        """
        if k < 1:
            raise InvalidArgumentError(f"k must be at least 1, got {k}")
        if cloud.is_empty():
            return []
        k_eff = min(k, len(cloud))
        distances, indices = cloud.tree.query(np.asarray(query, dtype=float), k=k_eff)
        distances = np.atleast_1d(distances)
        indices = np.atleast_1d(indices)
        return [(int(index), float(distance)) for index, distance in zip(indices, distances)]

    def estimate_normal(self, cloud: Cloud, index: int, k: int = None) -> np.ndarray:
        k = k or self.config.knn_k
        neighbours = [i for i, _ in self.knn_search(cloud, cloud.positions[index], k)]
        neighbourhood = cloud.positions[neighbours]
        covariance = np.cov(neighbourhood.T, bias=True)
        eigenvalues, eigenvectors = np.linalg.eigh(covariance)
        if eigenvalues[1] < EIGEN_ZERO:
            raise DegenerateNeighborhoodError(f"Neighbourhood of point {index} is collinear or coincident")
        normal = eigenvectors[:, 0]
        if np.dot(normal, cloud.sensor_origin - cloud.positions[index]) < 0:
            normal = -normal
        return normal

    def compute_curvature(self, cloud: Cloud, index: int, config: CurvatureConfig = None) -> float:
        """
        Gaussian curvature of the quadratic surface fitted to the neighbourhood of one point, evaluated at the
        fit origin. Singular fits count as flat and increment curvature_unavailable_count.

        Parameters:
        :param cloud: Cloud holding the point.
        :param index: Row index of the point.
        :param config: CurvatureConfig; the processor's own config when omitted.

        Returns:
        :return: Curvature in 1/m^2.
        """
        config = config or self.config
        neighbours = [i for i, _ in self.knn_search(cloud, cloud.positions[index], config.knn_k)]
        if len(neighbours) < 6:
            self._count_unavailable(1)
            return 0.0
        if cloud.has_normals():
            normal = cloud.normals[index]
        else:
            normal = self.estimate_normal(cloud, index, config.knn_k)
        positions = cloud.positions
        curvature, unavailable = self._fit_curvatures(positions[[neighbours]], positions[[index]], normal[None, :])
        self._count_unavailable(int(unavailable.sum()))
        return float(curvature[0])

    def compute_features(self, cloud: Cloud, config: CurvatureConfig = None) -> Cloud:
        """
        Vectorized normals and curvatures for every point of a cloud.

        Parameters:
        :param cloud: Cloud to process.
        :param config: CurvatureConfig; the processor's own config when omitted.

        Returns:
        :return: A copy of the cloud with nx, ny, nz and curvature columns.
        """
        config = config or self.config
        n_points = len(cloud)
        if n_points == 0:
            return cloud.with_columns(nx=[], ny=[], nz=[], curvature=[])
        positions = cloud.positions
        k_eff = min(config.knn_k, n_points)
        _, indices = cloud.tree.query(positions, k=k_eff)
        indices = indices.reshape(n_points, k_eff)
        neighbourhoods = positions[indices]

        centred = neighbourhoods - neighbourhoods.mean(axis=1, keepdims=True)
        covariances = np.einsum('nki,nkj->nij', centred, centred) / k_eff
        eigenvalues, eigenvectors = np.linalg.eigh(covariances)
        normals = eigenvectors[:, :, 0]
        degenerate = eigenvalues[:, 1] < EIGEN_ZERO
        if degenerate.any():
            self.degenerate_normal_count += int(degenerate.sum())
            logger.debug(f"{int(degenerate.sum())} points have collinear neighbourhoods")
        facing = np.einsum('ni,ni->n', normals, cloud.sensor_origin - positions)
        normals[facing < 0] *= -1.0

        if k_eff < 6:
            curvatures = np.zeros(n_points)
            self._count_unavailable(n_points)
        else:
            curvatures, unavailable = self._fit_curvatures(neighbourhoods, positions, normals)
            curvatures[degenerate] = 0.0
            self._count_unavailable(int((unavailable | degenerate).sum()))
        return cloud.with_columns(normals=normals, curvature=curvatures)

    def _fit_curvatures(self, neighbourhoods, centres, normals):
        # tangent axes: u is orthogonal to n and to the world axis least aligned with n
        helper = np.eye(3)[np.argmin(np.abs(normals), axis=1)]
        u_axis = np.cross(normals, helper)
        u_axis /= np.linalg.norm(u_axis, axis=1, keepdims=True)
        v_axis = np.cross(normals, u_axis)

        offsets = neighbourhoods - centres[:, None, :]
        x = np.einsum('nki,ni->nk', offsets, u_axis)
        y = np.einsum('nki,ni->nk', offsets, v_axis)
        z = np.einsum('nki,ni->nk', offsets, normals)
        design = np.stack([x * x, x * y, y * y, x, y, np.ones_like(x)], axis=2)

        with np.errstate(divide='ignore', invalid='ignore'):
            condition = np.linalg.cond(design)
        unavailable = ~np.isfinite(condition) | (condition > MAX_FIT_CONDITION)
        coefficients = np.einsum('nij,nj->ni', np.linalg.pinv(design), z)

        a, b, c, d, e = (coefficients[:, i] for i in range(5))
        # fundamental forms of z(x, y) at the fit origin
        first_e = 1.0 + d * d
        first_f = d * e
        first_g = 1.0 + e * e
        scale = np.sqrt(1.0 + d * d + e * e)
        second_l = 2.0 * a / scale
        second_m = b / scale
        second_n = 2.0 * c / scale
        curvatures = (second_l * second_n - second_m ** 2) / (first_e * first_g - first_f ** 2)

        unavailable |= ~np.isfinite(curvatures)
        curvatures = np.where(unavailable, 0.0, curvatures)
        return curvatures, unavailable

    def _count_unavailable(self, count: int):
        if count:
            self.curvature_unavailable_count += count
            logger.debug(f"Curvature fit unavailable for {count} points, treated as flat")

    def cluster_by_curvature(self, cloud: Cloud, config: CurvatureConfig = None) -> np.ndarray:
        """
        Partitions the cloud into the planar cluster 0 and connected non-planar clusters 1..n. Non-planar
        components smaller than min_cluster_size are labelled REMOVED_CLUSTER.

        Parameters:
        :param cloud: Cloud with a curvature column.
        :param config: CurvatureConfig; the processor's own config when omitted.

        Returns:
        :return: Integer array of cluster ids, one per point.
        """
        config = config or self.config
        if not cloud.has_curvature():
            raise InvalidArgumentError("cluster_by_curvature requires computed curvatures")
        curvatures = np.nan_to_num(cloud.curvatures, nan=0.0)
        labels = np.full(len(cloud), PLANAR_CLUSTER, dtype=int)
        curved = np.flatnonzero(np.abs(curvatures) >= config.flat_threshold)
        if curved.size == 0:
            return labels

        curved_cloud = cloud.subset(curved)
        pairs = curved_cloud.tree.query_pairs(config.cluster_radius, output_type='ndarray')
        adjacency = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
                               shape=(curved.size, curved.size))
        _, components = connected_components(adjacency, directed=False)

        sizes = np.bincount(components)
        _, first_seen = np.unique(components, return_index=True)
        next_id = PLANAR_CLUSTER + 1
        for component in components[np.sort(first_seen)]:
            members = curved[components == component]
            if sizes[component] < config.min_cluster_size:
                labels[members] = REMOVED_CLUSTER
            else:
                labels[members] = next_id
                next_id += 1
        return labels

    def voxel_representatives(self, positions: np.ndarray, voxel: float) -> np.ndarray:
        """Index of the point nearest each occupied voxel's centroid, ascending."""
        if voxel <= 0:
            raise InvalidArgumentError(f"Voxel size must be positive, got {voxel}")
        if len(positions) == 0:
            return np.zeros(0, dtype=int)
        keys = np.floor(positions / voxel).astype(np.int64)
        frame = pd.DataFrame({'kx': keys[:, 0], 'ky': keys[:, 1], 'kz': keys[:, 2],
                              'x': positions[:, 0], 'y': positions[:, 1], 'z': positions[:, 2]})
        grouped = frame.groupby(['kx', 'ky', 'kz'], sort=False)
        centroids = grouped[['x', 'y', 'z']].transform('mean').to_numpy()
        frame['d2'] = np.sum((positions - centroids) ** 2, axis=1)
        chosen = frame.groupby(['kx', 'ky', 'kz'], sort=False)['d2'].idxmin().to_numpy()
        return np.sort(chosen.astype(int))

    def downsample_uniform(self, cloud: Cloud, voxel: float) -> Cloud:
        if voxel <= 0:
            raise InvalidArgumentError(f"Voxel size must be positive, got {voxel}")
        return cloud.subset(self.voxel_representatives(cloud.positions, voxel))

    def downsample_curvature_aware(self, cloud: Cloud, config: CurvatureConfig = None) -> Cloud:
        """
        Per-cluster voxel downsampling: clusters whose mean |curvature| is below flat_threshold use coarse_voxel,
        the others fine_voxel. Removed points are dropped.

        Parameters:
        :param cloud: Cloud with curvatures; clusters are computed when the cluster column is missing.
        :param config: CurvatureConfig; the processor's own config when omitted.

        Returns:
        :return: Subset of the input cloud, attributes preserved, original order kept.
        """
        config = config or self.config
        if cloud.is_empty():
            return cloud.subset([])
        labels = cloud.clusters
        if labels is None:
            labels = self.cluster_by_curvature(cloud, config)
            cloud = cloud.with_columns(cluster=labels)
        positions = cloud.positions
        curvatures = np.nan_to_num(cloud.curvatures, nan=0.0)

        kept = []
        for cluster_id in np.unique(labels):
            if cluster_id == REMOVED_CLUSTER:
                continue
            members = np.flatnonzero(labels == cluster_id)
            flat = np.mean(np.abs(curvatures[members])) < config.flat_threshold
            voxel = config.coarse_voxel if flat else config.fine_voxel
            kept.append(members[self.voxel_representatives(positions[members], voxel)])
        if not kept:
            return cloud.subset([])
        return cloud.subset(np.sort(np.concatenate(kept)))

    def preprocess(self, cloud: Cloud, mode: str, config: CurvatureConfig = None) -> Cloud:
        """
        Scan preprocessing used before localization: a fine_voxel prefilter, features on the prefiltered scan, then
        either curvature-aware or uniform downsampling.

        Parameters:
        :param cloud: Raw scan.
        :param mode: 'curvature' or 'uniform'.
        :param config: CurvatureConfig; the processor's own config when omitted.

        Returns:
        :return: Downsampled Cloud carrying normals, curvature and cluster ids.
        """
        config = config or self.config
        if mode not in ('curvature', 'uniform'):
            raise InvalidArgumentError(f"Unknown preprocessing mode '{mode}'")
        featured = self.compute_features(self.downsample_uniform(cloud, config.fine_voxel), config)
        if mode == 'curvature':
            featured = featured.with_columns(cluster=self.cluster_by_curvature(featured, config))
            return self.downsample_curvature_aware(featured, config)
        return self.downsample_uniform(featured, config.uniform_voxel)
