//! Text semantic enrichment: a dataset-wide knowledge base of description
//! embeddings is clustered into implicit attributes, each class template
//! embedding hunts its top-K attributes, and the attributes are folded back
//! into the class embedding with softmax similarity weights.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::store::TensorStore;

pub const TEMPLATE: &str = "a clean origami of [CLASS]";
pub const DEFAULT_LAMBDA: f32 = 0.5;
pub const DEFAULT_TOPK: usize = 8;
pub const DEFAULT_KMEANS_ITERS: usize = 100;

/// Header of a knowledge file (`meta.knowledge` in the manifest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeHeader {
    pub classes: Vec<String>,
    pub n: usize,
    pub dim: usize,
    #[serde(default = "default_template")]
    pub template: String,
    /// Optional description strings, one list per class.
    #[serde(default)]
    pub descriptions: Vec<Vec<String>>,
}

fn default_template() -> String {
    TEMPLATE.to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionMeta {
    pub class: usize,
    pub text: String,
}

/// Unit-norm description embeddings for every class, plus the per-class
/// template embeddings `t_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub class_names: Vec<String>,
    pub template: String,
    /// `D x (n·C)`; column `c·n + i` is description `i` of class `c`.
    pub embeddings: Tensor,
    /// `D x C`.
    pub templates: Tensor,
    pub meta: Vec<DescriptionMeta>,
    pub n: usize,
}

impl KnowledgeBase {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn template_of(&self, c: usize) -> Vec<f32> {
        self.templates.col(c)
    }

    /// Writes a knowledge file. `descriptions[c]` is `n x D` (one row per
    /// description) and `templates[c]` has length `D`.
    pub fn write_file(
        path: &Path,
        header: &KnowledgeHeader,
        templates: &[Vec<f32>],
        descriptions: &[Tensor],
    ) -> Result<()> {
        let mut store = TensorStore::with_meta(json!({ "knowledge": header }));
        for (c, (t, d)) in templates.iter().zip(descriptions).enumerate() {
            store.insert(
                format!("class.{c}.template"),
                Tensor::new(vec![t.len()], t.clone())?,
            );
            store.insert(format!("class.{c}.descriptions"), d.clone());
        }
        store.save(path)
    }
}

fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Loads a knowledge file and L2-normalizes every embedding.
pub fn ingest_knowledge(path: &Path) -> Result<KnowledgeBase> {
    let store = TensorStore::load(path)?;
    let header: KnowledgeHeader = store
        .meta
        .get("knowledge")
        .cloned()
        .ok_or_else(|| Error::format(path, "manifest meta lacks `knowledge` header"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string())))?;
    let (n, d, classes) = (header.n, header.dim, header.classes.len());
    if n == 0 || d == 0 || classes == 0 {
        return Err(Error::format(path, "knowledge header declares an empty base"));
    }
    let mut embeddings = Tensor::zeros(vec![d, n * classes]);
    let mut templates = Tensor::zeros(vec![d, classes]);
    let mut meta = Vec::with_capacity(n * classes);
    for (c, name) in header.classes.iter().enumerate() {
        let t = store.get(&format!("class.{c}.template"))?;
        if t.len() != d {
            return Err(Error::DimMismatch {
                class: name.clone(),
                found: t.len(),
                expected: d,
            });
        }
        let t = normalized(t.data()).ok_or_else(|| Error::ZeroVector {
            class: name.clone(),
            index: usize::MAX,
        })?;
        for (r, v) in t.iter().enumerate() {
            templates.set(r, c, *v);
        }
        let desc = store.get(&format!("class.{c}.descriptions"))?;
        if desc.rank() != 2 {
            return Err(Error::format(path, format!("class {name}: descriptions must be 2-D")));
        }
        if desc.rows() != n {
            return Err(Error::RaggedClass {
                class: name.clone(),
                found: desc.rows(),
                expected: n,
            });
        }
        if desc.cols() != d {
            return Err(Error::DimMismatch {
                class: name.clone(),
                found: desc.cols(),
                expected: d,
            });
        }
        for i in 0..n {
            let v = normalized(desc.row(i)).ok_or_else(|| Error::ZeroVector {
                class: name.clone(),
                index: i,
            })?;
            for (r, x) in v.iter().enumerate() {
                embeddings.set(r, c * n + i, *x);
            }
            let text = header
                .descriptions
                .get(c)
                .and_then(|ds| ds.get(i))
                .cloned()
                .unwrap_or_default();
            meta.push(DescriptionMeta { class: c, text });
        }
    }
    Ok(KnowledgeBase {
        class_names: header.classes,
        template: header.template,
        embeddings,
        templates,
        meta,
        n,
    })
}

/// Implicit attribute space produced by k-means over the knowledge base.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSpace {
    /// Unit-norm centroids, `D x B`.
    pub centroids: Tensor,
    /// Cluster means before normalization, `D x B`.
    pub raw_centroids: Tensor,
    pub assignment: Vec<usize>,
    /// Final sum of squared distances to the (unnormalized) centroids.
    pub inertia: f64,
    /// Objective after every assignment step.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl AttributeSpace {
    pub fn count(&self) -> usize {
        self.centroids.cols()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let assignment = points
        .iter()
        .map(|p| {
            let (j, d) = nearest(p, centroids);
            total += d;
            j
        })
        .collect();
    (assignment, total)
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

/// Moves the point farthest from its centroid (taken from a cluster with at
/// least two members) into each empty cluster, then refreshes the means.
fn repair_empty(
    points: &[Vec<f64>],
    assignment: &mut [usize],
    centroids: &mut Vec<Vec<f64>>,
    counts: &mut Vec<usize>,
) {
    let k = centroids.len();
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let mut far = None::<(usize, f64)>;
        for (i, p) in points.iter().enumerate() {
            let a = assignment[i];
            if counts[a] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[a]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((idx, _)) = far else { break };
        assignment[idx] = empty;
        let (m, c) = means(points, assignment, k);
        *centroids = m;
        *counts = c;
    }
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.below(points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let next = rng
            .weighted_index(&d2)
            .unwrap_or_else(|| (0..points.len()).find(|i| !chosen.contains(i)).unwrap_or(0));
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Lloyd's k-means with k-means++ seeding over the columns of `points`
/// (`D x n`). Centroids are re-normalized to unit length once clustering ends.
pub fn kmeans(points: &Tensor, k: usize, rng: &mut Rng, max_iters: usize) -> Result<AttributeSpace> {
    let n = points.cols();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cluster count {k} outside 1..={n}"
        )));
    }
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|j| points.col(j).into_iter().map(|v| v as f64).collect())
        .collect();
    let mut centroids = kmeans_pp(&pts, k, rng);
    let (mut assignment, j0) = assign_all(&pts, &centroids);
    let mut history = vec![j0];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let (m, mut counts) = means(&pts, &assignment, k);
        centroids = m;
        repair_empty(&pts, &mut assignment, &mut centroids, &mut counts);
        let (next, j) = assign_all(&pts, &centroids);
        history.push(j);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    let (m, mut counts) = means(&pts, &assignment, k);
    centroids = m;
    repair_empty(&pts, &mut assignment, &mut centroids, &mut counts);
    let inertia = pts
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();

    let d = points.rows();
    let mut raw = Tensor::zeros(vec![d, k]);
    let mut unit = Tensor::zeros(vec![d, k]);
    for (j, c) in centroids.iter().enumerate() {
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (r, &v) in c.iter().enumerate() {
            raw.set(r, j, v as f32);
            unit.set(r, j, if norm > 0.0 { (v / norm) as f32 } else { 0.0 });
        }
    }
    Ok(AttributeSpace {
        centroids: unit,
        raw_centroids: raw,
        assignment,
        inertia,
        history,
        iterations,
        converged,
    })
}

pub fn cluster_attributes(
    kb: &KnowledgeBase,
    clusters: usize,
    rng: &mut Rng,
    max_iters: usize,
) -> Result<AttributeSpace> {
    kmeans(&kb.embeddings, clusters, rng, max_iters)
}

/// Attribute neighbor with its similarity score `t_cᵀ a_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub score: f32,
}

/// Top-`k` columns of `attributes` by dot product with `t`, best first;
/// equal scores keep the lower index first.
pub fn hunt_attributes(t: &[f32], attributes: &Tensor, k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(Error::InvalidArgument("top-K must be at least 1".into()));
    }
    if attributes.rows() != t.len() {
        return Err(Error::Shape {
            op: "hunt_attributes",
            left: vec![t.len()],
            right: attributes.shape().to_vec(),
        });
    }
    let b = attributes.cols();
    let mut scored: Vec<(usize, f64)> = (0..b)
        .map(|j| {
            let s = (0..t.len())
                .map(|r| t[r] as f64 * attributes.at(r, j) as f64)
                .sum::<f64>();
            (j, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k.min(b))
        .map(|(index, s)| Neighbor {
            index,
            score: s as f32,
        })
        .collect())
}

/// Softmax weights of the neighbor scores, in `f64`.
fn neighbor_weights(neighbors: &[Neighbor]) -> Vec<f64> {
    let max = neighbors
        .iter()
        .map(|n| n.score as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = neighbors.iter().map(|n| (n.score as f64 - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `T_c = t_c + λ Σ_j softmax(scores)_j a_j`.
pub fn enrich(t: &[f32], neighbors: &[Neighbor], attributes: &Tensor, lambda: f32) -> Result<Vec<f32>> {
    if neighbors.is_empty() {
        return Err(Error::Empty("enrich neighbor set"));
    }
    let w = neighbor_weights(neighbors);
    let mut mix = vec![0.0f64; t.len()];
    for (nb, wj) in neighbors.iter().zip(&w) {
        for (r, m) in mix.iter_mut().enumerate() {
            *m += wj * attributes.at(r, nb.index) as f64;
        }
    }
    Ok(t.iter()
        .zip(&mix)
        .map(|(&x, &m)| x + (lambda as f64 * m) as f32)
        .collect())
}

/// How the class representation was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankMode {
    /// Template embeddings only.
    Template,
    /// Each class fuses its own description embeddings, no clustering.
    Explicit,
    /// Clustered implicit attributes.
    Attributes,
}

/// Enriched per-class text representation.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRepresentation {
    pub mode: BankMode,
    pub class_names: Vec<String>,
    /// `t_c` columns, `D x C`.
    pub templates: Tensor,
    /// `T_c` columns, `D x C`.
    pub enriched: Tensor,
    /// Attribute (or description) columns the neighbors index into.
    pub attributes: Tensor,
    pub neighbors: Vec<Vec<Neighbor>>,
    pub lambda: f32,
    pub topk: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankHeader {
    mode: BankMode,
    classes: Vec<String>,
    lambda: f32,
    topk: usize,
    neighbors: Vec<Vec<Neighbor>>,
    #[serde(default)]
    provenance: Option<serde_json::Value>,
}

impl TextRepresentation {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.enriched.rows()
    }

    pub fn enriched_of(&self, c: usize) -> Vec<f32> {
        self.enriched.col(c)
    }

    pub fn save(&self, path: &Path, provenance: Option<serde_json::Value>) -> Result<()> {
        let header = BankHeader {
            mode: self.mode,
            classes: self.class_names.clone(),
            lambda: self.lambda,
            topk: self.topk,
            neighbors: self.neighbors.clone(),
            provenance,
        };
        let mut store = TensorStore::with_meta(json!({ "bank": header }));
        store.insert("template", self.templates.clone());
        store.insert("enriched", self.enriched.clone());
        store.insert("attributes", self.attributes.clone());
        store.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = TensorStore::load(path)?;
        let header: BankHeader = store
            .meta
            .get("bank")
            .cloned()
            .ok_or_else(|| Error::format(path, "manifest meta lacks `bank` header"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string())))?;
        let templates = store.take("template")?;
        let enriched = store.take("enriched")?;
        let attributes = store.take("attributes")?;
        if templates.shape() != enriched.shape() || templates.cols() != header.classes.len() {
            return Err(Error::format(path, "bank tensors disagree with class list"));
        }
        Ok(Self {
            mode: header.mode,
            class_names: header.classes,
            templates,
            enriched,
            attributes,
            neighbors: header.neighbors,
            lambda: header.lambda,
            topk: header.topk,
        })
    }
}

fn bank_from_columns(
    mode: BankMode,
    kb: &KnowledgeBase,
    attributes: Tensor,
    per_class: impl Fn(usize, &[f32]) -> Result<Vec<Neighbor>>,
    lambda: f32,
    topk: usize,
) -> Result<TextRepresentation> {
    let (d, c) = (kb.dim(), kb.classes());
    let mut enriched = Tensor::zeros(vec![d, c]);
    let mut neighbors = Vec::with_capacity(c);
    for class in 0..c {
        let t = kb.template_of(class);
        let nb = per_class(class, &t)?;
        let tc = enrich(&t, &nb, &attributes, lambda)?;
        for (r, v) in tc.iter().enumerate() {
            enriched.set(r, class, *v);
        }
        neighbors.push(nb);
    }
    Ok(TextRepresentation {
        mode,
        class_names: kb.class_names.clone(),
        templates: kb.templates.clone(),
        enriched,
        attributes,
        neighbors,
        lambda,
        topk,
    })
}

/// Clusters the knowledge base into `clusters` attributes and enriches every
/// class template with its top-`topk` attributes.
pub fn build_text_bank(
    kb: &KnowledgeBase,
    clusters: usize,
    topk: usize,
    lambda: f32,
    rng: &mut Rng,
    max_iters: usize,
) -> Result<TextRepresentation> {
    let attrs = cluster_attributes(kb, clusters, rng, max_iters)?;
    let centroids = attrs.centroids.clone();
    bank_from_columns(
        BankMode::Attributes,
        kb,
        attrs.centroids,
        |_, t| hunt_attributes(t, &centroids, topk),
        lambda,
        topk,
    )
}

/// Baseline without clustering: each class fuses its own `n` descriptions
/// with the same softmax-weighted aggregation.
pub fn build_explicit_bank(kb: &KnowledgeBase, lambda: f32) -> Result<TextRepresentation> {
    let n = kb.n;
    let embeddings = kb.embeddings.clone();
    bank_from_columns(
        BankMode::Explicit,
        kb,
        kb.embeddings.clone(),
        |class, t| {
            let own = embeddings.col_block(class * n, (class + 1) * n);
            Ok(hunt_attributes(t, &own, n)?
                .into_iter()
                .map(|nb| Neighbor {
                    index: class * n + nb.index,
                    score: nb.score,
                })
                .collect())
        },
        lambda,
        n,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub mode: BankMode,
    /// Number of attribute clusters `B`.
    pub clusters: usize,
    pub topk: usize,
    pub lambda: f32,
    pub kmeans_iters: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            mode: BankMode::Attributes,
            clusters: 16,
            topk: DEFAULT_TOPK,
            lambda: DEFAULT_LAMBDA,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
        }
    }
}

impl BankConfig {
    pub fn build(&self, kb: &KnowledgeBase, rng: &mut Rng) -> Result<TextRepresentation> {
        match self.mode {
            BankMode::Template => Ok(template_bank(kb)),
            BankMode::Explicit => build_explicit_bank(kb, self.lambda),
            BankMode::Attributes => build_text_bank(
                kb,
                self.clusters,
                self.topk,
                self.lambda,
                rng,
                self.kmeans_iters,
            ),
        }
    }
}

/// Bank whose class representations are the plain templates.
pub fn template_bank(kb: &KnowledgeBase) -> TextRepresentation {
    TextRepresentation {
        mode: BankMode::Template,
        class_names: kb.class_names.clone(),
        templates: kb.templates.clone(),
        enriched: kb.templates.clone(),
        attributes: Tensor::zeros(vec![kb.dim(), 0]),
        neighbors: vec![Vec::new(); kb.classes()],
        lambda: 0.0,
        topk: 0,
    }
}
