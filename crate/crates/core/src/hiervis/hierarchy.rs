//! Patch features to view tokens to a scene token, and the concatenated
//! visual sequence `[patches of view 1, .., patches of view 5, V1..V5, S]`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::block::{glorot, BlockCache, BlockParams};
use super::HierError;

pub const VIEW_COUNT: usize = 5;

/// Both attention layers plus their learned queries.
#[derive(Debug, Clone, PartialEq)]
pub struct HierParams {
    pub view_block: BlockParams,
    pub scene_block: BlockParams,
    /// One query per view, `5 x d`.
    pub view_queries: Array2<f64>,
    pub scene_query: Array1<f64>,
}

impl HierParams {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self, HierError> {
        Ok(Self {
            view_block: BlockParams::zeros(dim, heads)?,
            scene_block: BlockParams::zeros(dim, heads)?,
            view_queries: Array2::zeros((VIEW_COUNT, dim)),
            scene_query: Array1::zeros(dim),
        })
    }

    pub fn init<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self, HierError> {
        let view_block = BlockParams::init(dim, heads, rng)?;
        let scene_block = BlockParams::init(dim, heads, rng)?;
        let view_queries = glorot(VIEW_COUNT, dim, rng);
        let scene_query = glorot(1, dim, rng).row(0).to_owned();
        Ok(Self { view_block, scene_block, view_queries, scene_query })
    }

    pub fn dim(&self) -> usize {
        self.scene_query.len()
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = Vec::new();
        for (prefix, b) in [("view_block", &self.view_block), ("scene_block", &self.scene_block)] {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.push(("view_queries".into(), self.view_queries.view().into_dyn()));
        out.push(("scene_query".into(), self.scene_query.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = Vec::new();
        for (prefix, b) in [("view_block", &mut self.view_block), ("scene_block", &mut self.scene_block)] {
            out.extend(b.tensors_mut().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.push(("view_queries".into(), self.view_queries.view_mut().into_dyn()));
        out.push(("scene_query".into(), self.scene_query.view_mut().into_dyn()));
        out
    }
}

/// The assembled visual sequence and its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureHierarchy {
    pub patches: Vec<Array2<f64>>,
    pub view_tokens: Array2<f64>,
    pub scene_token: Array1<f64>,
    /// Rows in order: every patch of view 1, .., view 5, then V1..V5, then S.
    pub f_v: Array2<f64>,
}

impl FeatureHierarchy {
    pub fn token_count(&self) -> usize {
        self.f_v.nrows()
    }

    pub fn patch_count(&self) -> usize {
        self.patches.iter().map(|p| p.nrows()).sum()
    }

    /// Row of `f_v` holding the token of view `m` (0-based).
    pub fn view_token_row(&self, m: usize) -> usize {
        self.patch_count() + m
    }

    pub fn scene_token_row(&self) -> usize {
        self.patch_count() + VIEW_COUNT
    }
}

fn check_patches(patches: &[Array2<f64>], dim: usize) -> Result<(), HierError> {
    if patches.len() != VIEW_COUNT {
        return Err(HierError::ViewCount(patches.len()));
    }
    for p in patches {
        if p.ncols() != dim {
            return Err(HierError::Dim { what: "patch features", expected: dim, got: p.ncols() });
        }
        if p.nrows() == 0 {
            return Err(HierError::NoKeys);
        }
    }
    Ok(())
}

/// Each view's query attends over that view's patches only.
pub fn view_tokens(params: &HierParams, patches: &[Array2<f64>]) -> Result<(Array2<f64>, Vec<BlockCache>), HierError> {
    check_patches(patches, params.dim())?;
    let mut tokens = Array2::zeros((VIEW_COUNT, params.dim()));
    let mut caches = Vec::with_capacity(VIEW_COUNT);
    for (m, p) in patches.iter().enumerate() {
        let q = params.view_queries.slice(s![m..m + 1, ..]);
        let (out, cache) = params.view_block.forward(q, p.view())?;
        tokens.row_mut(m).assign(&out.row(0));
        caches.push(cache);
    }
    Ok((tokens, caches))
}

/// The scene query attends over the five view tokens.
pub fn scene_token(params: &HierParams, view_tokens: ArrayView2<f64>) -> Result<(Array1<f64>, BlockCache), HierError> {
    if view_tokens.nrows() != VIEW_COUNT {
        return Err(HierError::ViewCount(view_tokens.nrows()));
    }
    let q = params.scene_query.view().insert_axis(Axis(0));
    let (out, cache) = params.scene_block.forward(q, view_tokens)?;
    Ok((out.row(0).to_owned(), cache))
}

pub fn assemble_hierarchy(
    patches: Vec<Array2<f64>>,
    view_tokens: Array2<f64>,
    scene_token: Array1<f64>,
) -> Result<FeatureHierarchy, HierError> {
    let dim = scene_token.len();
    check_patches(&patches, dim)?;
    if view_tokens.dim() != (VIEW_COUNT, dim) {
        return Err(HierError::Dim { what: "view tokens", expected: dim, got: view_tokens.ncols() });
    }
    let mut parts: Vec<ArrayView2<f64>> = patches.iter().map(|p| p.view()).collect();
    parts.push(view_tokens.view());
    parts.push(scene_token.view().insert_axis(Axis(0)));
    let f_v = concatenate(Axis(0), &parts).expect("shapes checked above");
    Ok(FeatureHierarchy { patches, view_tokens, scene_token, f_v })
}

#[derive(Debug, Clone)]
pub struct HierCache {
    view: Vec<BlockCache>,
    scene: BlockCache,
    patch_rows: Vec<usize>,
}

impl HierCache {
    pub fn view_attention(&self, m: usize) -> &[Array2<f64>] {
        &self.view[m].attn
    }

    pub fn scene_attention(&self) -> &[Array2<f64>] {
        &self.scene.attn
    }
}

pub fn encode(params: &HierParams, patches: Vec<Array2<f64>>) -> Result<(FeatureHierarchy, HierCache), HierError> {
    let (tokens, view) = view_tokens(params, &patches)?;
    let (scene_tok, scene) = scene_token(params, tokens.view())?;
    let patch_rows = patches.iter().map(|p| p.nrows()).collect();
    let hierarchy = assemble_hierarchy(patches, tokens, scene_tok)?;
    Ok((hierarchy, HierCache { view, scene, patch_rows }))
}

/// Backpropagate a gradient on `f_v` into `grads`; returns per-view patch
/// gradients.
pub fn encode_backward(params: &HierParams, cache: &HierCache, d_fv: ArrayView2<f64>, grads: &mut HierParams) -> Vec<Array2<f64>> {
    let total: usize = cache.patch_rows.iter().sum();
    let d_scene = d_fv.slice(s![total + VIEW_COUNT..total + VIEW_COUNT + 1, ..]);
    let (dq_scene, d_tokens_from_scene) = params.scene_block.backward(&cache.scene, d_scene, &mut grads.scene_block);
    grads.scene_query += &dq_scene.row(0);
    let d_tokens = &d_fv.slice(s![total..total + VIEW_COUNT, ..]) + &d_tokens_from_scene;
    let mut offset = 0;
    let mut d_patches = Vec::with_capacity(VIEW_COUNT);
    for (m, &rows) in cache.patch_rows.iter().enumerate() {
        let d_out = d_tokens.slice(s![m..m + 1, ..]);
        let (dq, dp) = params.view_block.backward(&cache.view[m], d_out, &mut grads.view_block);
        let mut row = grads.view_queries.row_mut(m);
        row += &dq.row(0);
        d_patches.push(dp + d_fv.slice(s![offset..offset + rows, ..]));
        offset += rows;
    }
    d_patches
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, n: usize, seed: u64) -> (HierParams, Vec<Array2<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = HierParams::init(dim, 4, &mut rng).unwrap();
        let patches = (0..VIEW_COUNT).map(|_| Array2::from_shape_simple_fn((n, dim), || rng.gen_range(-1.0..1.0))).collect();
        (params, patches)
    }

    #[test]
    fn cardinality() {
        for n in [1, 4, 196] {
            let (params, patches) = setup(8, n, 1);
            let (h, _) = encode(&params, patches).unwrap();
            assert_eq!(h.token_count(), 5 * n + 6);
            assert_eq!(h.f_v.row(5 * n), h.view_tokens.row(0));
            assert_eq!(h.f_v.row(5 * n + 5), h.scene_token.view());
            assert_eq!(h.f_v.row(n), h.patches[1].row(0));
        }
    }

    #[test]
    fn perturbing_one_view_is_local() {
        let (params, mut patches) = setup(8, 3, 2);
        let (a, _) = view_tokens(&params, &patches).unwrap();
        patches[1][[0, 0]] += 0.5;
        let (b, _) = view_tokens(&params, &patches).unwrap();
        for m in [0, 2, 3, 4] {
            assert_eq!(a.row(m), b.row(m));
        }
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn identical_patches_distinct_queries() {
        let (params, patches) = setup(8, 3, 3);
        let same: Vec<_> = (0..VIEW_COUNT).map(|_| patches[0].clone()).collect();
        let (t, _) = view_tokens(&params, &same).unwrap();
        for m in 1..VIEW_COUNT {
            assert_ne!(t.row(0), t.row(m));
        }
    }

    #[test]
    fn scene_token_ignores_view_order() {
        let (params, patches) = setup(8, 2, 4);
        let (t, _) = view_tokens(&params, &patches).unwrap();
        let (s0, c0) = scene_token(&params, t.view()).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permuted = ndarray::stack(Axis(0), &perm.map(|i| t.row(i))).unwrap();
        let (s1, c1) = scene_token(&params, permuted.view()).unwrap();
        for (a, b) in s0.iter().zip(s1.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (h0, h1) in c0.attn.iter().zip(&c1.attn) {
            for (j, &i) in perm.iter().enumerate() {
                assert!((h1[[0, j]] - h0[[0, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_view_count() {
        let (params, mut patches) = setup(8, 2, 5);
        patches.pop();
        assert!(matches!(view_tokens(&params, &patches), Err(HierError::ViewCount(4))));
        let t = Array2::zeros((4, 8));
        assert!(matches!(scene_token(&params, t.view()), Err(HierError::ViewCount(4))));
    }

    #[test]
    fn patch_dim_mismatch() {
        let (params, mut patches) = setup(8, 2, 6);
        patches[2] = Array2::zeros((2, 6));
        assert!(matches!(encode(&params, patches), Err(HierError::Dim { .. })));
    }

    #[test]
    fn gradient_through_first_view_token_stays_local() {
        let (params, patches) = setup(8, 2, 7);
        let (h, cache) = encode(&params, patches).unwrap();
        let mut seed = Array2::zeros(h.f_v.raw_dim());
        seed.row_mut(h.view_token_row(0)).fill(1.0);
        let mut grads = HierParams::zeros(8, 4).unwrap();
        let dp = encode_backward(&params, &cache, seed.view(), &mut grads);
        assert!(dp[0].iter().any(|&g| g != 0.0));
        for d in &dp[1..] {
            assert!(d.iter().all(|&g| g == 0.0));
        }
        for m in 1..VIEW_COUNT {
            assert!(grads.view_queries.row(m).iter().all(|&g| g == 0.0));
        }
        assert!(grads.scene_query.iter().all(|&g| g == 0.0));
        assert!(grads.scene_block.tensors().iter().all(|(_, t)| t.iter().all(|&g| g == 0.0)));
    }
}
