use std::collections::{BTreeMap, BTreeSet};

use image::ImageEncoder;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    sanitize, Computed, InputHash, Pipeline, PipelineError, Role, SceneManifest, Stage, Unit,
};
use crate::geometry::{fit_obb7, sample_face_points, Obb7, Point3};
use crate::imaging::{
    canonicalize_rotation, depth_label_map, draw_boxes, is_overexposed, max_coverage_frames,
    projected_box, rank_object_views, rotate_frame, rotate_gray, sample_frames, visible_ratio,
    Box2, CameraFrame, DepthMap, GrayImage, RankedView, Rotation, ViewStat, VisibilityTable,
    TOP_VIEWS,
};
use crate::label_graph::{
    cached_label_graph, group_distractors, label_set_hash, normalize_label, GraphBuildReport,
    Grouping, LabelGraph,
};
use crate::oracle::{bindings, validate_yes_no, ImageRef, YesNo};
use crate::referring::{refer_scene, AppearanceAttributes, ReferObject, ReferReport, ReferralSet};
use crate::scene_graph::{
    build_initial_graph, CorrectionReport, Corrector, RelationVocabulary, SceneGraph,
};
use crate::taskgen::{
    self, balance_and_cap, generate_scene, CaptionSet, DatasetManifest, FrameCaption,
    ObjectCaption, SceneInputs, TaskObject,
};
use crate::util::{map_bounded, round6, sha256_hex};
use crate::ObjectId;

const NYU40: &str = include_str!("../../assets/nyu40.txt");
const SUBJECT_COLOR: [u8; 3] = [255, 0, 0];
const OBJECT_COLOR: [u8; 3] = [0, 0, 255];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanObject {
    pub id: ObjectId,
    pub label: Option<String>,
    pub obb: Obb7,
    /// Whether the box was fitted to labeled points.
    pub from_points: bool,
    pub attributes: Option<AppearanceAttributes>,
    pub caption: Option<String>,
}

/// A kept frame after rotation to the canonical orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanFrame {
    pub frame: CameraFrame,
    pub width: u32,
    pub height: u32,
    pub rotation_deg: u32,
    pub pose_degenerate: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanDiagnostics {
    pub sampled_frames: usize,
    pub overexposed_frames: Vec<String>,
    pub excluded_frames: Vec<String>,
    /// Unreadable frames and depth problems, by frame id.
    pub frame_notes: BTreeMap<String, String>,
    pub dropped_objects: BTreeMap<ObjectId, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanScene {
    pub scene_id: String,
    pub source: String,
    pub dropped: Option<String>,
    pub objects: Vec<CleanObject>,
    pub frames: Vec<CleanFrame>,
    pub visibility: VisibilityTable,
    pub views: BTreeMap<ObjectId, Vec<RankedView>>,
    pub diagnostics: CleanDiagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub scene_id: String,
    pub captions: CaptionSet,
    /// Categories predicted for unlabeled objects.
    pub labels: BTreeMap<ObjectId, String>,
    pub attributes: BTreeMap<ObjectId, AppearanceAttributes>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelGraphArtifact {
    label_set_sha256: String,
    graph: LabelGraph,
    build: Option<GraphBuildReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGroups {
    pub scene_id: String,
    /// Canonical label per labeled object.
    pub labels: BTreeMap<ObjectId, String>,
    pub grouping: Grouping,
    pub rule_triples: usize,
    pub correction: CorrectionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReferrals {
    pub scene_id: String,
    pub report: ReferReport,
    pub flagged: Vec<ObjectId>,
    pub undescribed: Vec<ObjectId>,
}

/// Clean artifact merged with the optional annotations.
struct SceneView {
    clean: CleanScene,
    labels: BTreeMap<ObjectId, String>,
    attributes: BTreeMap<ObjectId, AppearanceAttributes>,
    captions: CaptionSet,
    digest: String,
}

fn to_json(v: &impl Serialize) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("artifact serializes");
    b.push(b'\n');
    b
}

fn png_rgb(img: &image::RgbImage) -> Vec<u8> {
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgb8,
        )
        .expect("in-memory png encoding");
    buf
}

fn png_gray(img: &GrayImage) -> Vec<u8> {
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(
            &img.data,
            img.width,
            img.height,
            image::ExtendedColorType::L8,
        )
        .expect("in-memory png encoding");
    buf
}

fn round_obb(b: Obb7) -> Obb7 {
    Obb7 {
        center: Point3::new(round6(b.center.x), round6(b.center.y), round6(b.center.z)),
        size: b.size.map(round6),
        yaw: round6(b.yaw),
    }
}

fn nonempty(t: &str) -> Result<String, String> {
    let t = t.trim();
    if t.is_empty() {
        Err("empty reply".into())
    } else {
        Ok(t.to_string())
    }
}

/// `YES. <description>` → `Some(description)`; `NO...` → `None`.
pub(crate) fn parse_object_annotation(text: &str) -> Result<Option<String>, String> {
    match validate_yes_no(text) {
        YesNo::Malformed => Err(format!("expected YES/NO first, got {text:?}")),
        YesNo::No => Ok(None),
        YesNo::Yes => {
            let rest = text
                .trim_start_matches(|c: char| !c.is_alphabetic())
                .trim_start_matches(|c: char| c.is_alphabetic())
                .trim_start_matches(|c: char| !c.is_alphanumeric())
                .trim();
            Ok((!rest.is_empty()).then(|| rest.to_string()))
        }
    }
}

fn nyu40() -> Vec<&'static str> {
    NYU40
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

fn parse_category(text: &str) -> Result<String, String> {
    let t = text
        .trim()
        .trim_matches(|c: char| c == '.' || c == '"' || c == '\'')
        .to_lowercase();
    nyu40()
        .into_iter()
        .find(|c| *c == t)
        .map(str::to_string)
        .ok_or_else(|| format!("{t:?} is not an NYU-40 category"))
}

pub(crate) fn parse_attributes(text: &str) -> Result<AppearanceAttributes, String> {
    let (Some(a), Some(b)) = (text.find('{'), text.rfind('}')) else {
        return Err("no JSON object in reply".into());
    };
    let v: Value = serde_json::from_str(&text[a..=b]).map_err(|e| e.to_string())?;
    let field = |k: &str| -> Result<Option<String>, String> {
        match v.get(k) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) if s.trim().is_empty() => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.trim().to_lowercase())),
            Some(other) => Err(format!("{k} is not a string: {other}")),
        }
    };
    Ok(AppearanceAttributes {
        color: field("color")?,
        material: field("material")?,
        shape: field("shape")?,
        condition: field("condition")?,
    })
}

/// Pixel coverage of `id` inside its own box on a depth-ordered label map.
fn label_map_ratio(b: &Box2, lm: &crate::imaging::LabelMap) -> f64 {
    let Some(b) = b.clamped(lm.width, lm.height) else {
        return 0.0;
    };
    let area = (b.x_max - b.x_min + 1) as f64 * (b.y_max - b.y_min + 1) as f64;
    let mut n = 0usize;
    for y in b.y_min..=b.y_max {
        for x in b.x_min..=b.x_max {
            if lm.at(x, y) == Some(b.object_id) {
                n += 1;
            }
        }
    }
    n as f64 / area
}

fn rel_clean(scene: &str) -> String {
    format!("clean/{}.json", sanitize(scene))
}

fn rel_annotate(scene: &str) -> String {
    format!("annotate/{}.json", sanitize(scene))
}

fn rel_groups(scene: &str) -> String {
    format!("graph/{}.json", sanitize(scene))
}

fn rel_scene_graph(scene: &str) -> String {
    format!("scene_graphs/{}.jsonl", sanitize(scene))
}

fn rel_referrals(scene: &str) -> String {
    format!("referrals/{}.jsonl", sanitize(scene))
}

fn rel_refer_report(scene: &str) -> String {
    format!("refer/{}.json", sanitize(scene))
}

const REL_LABEL_GRAPH: &str = "graph/label_graph.json";

impl Pipeline {
    fn concurrency(&self, role: Role) -> usize {
        self.config.oracles.effective(role).concurrency
    }

    fn collect<T: Send>(
        &self,
        manifests: &[SceneManifest],
        f: impl Fn(&SceneManifest) -> Result<Option<T>, PipelineError> + Sync + Send,
    ) -> Result<Vec<T>, PipelineError> {
        let results: Vec<Result<Option<T>, PipelineError>> =
            self.pool.install(|| manifests.par_iter().map(f).collect());
        let mut out = Vec::new();
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    // ---- clean ----------------------------------------------------------

    pub(crate) fn stage_clean(
        &self,
        manifests: &[SceneManifest],
    ) -> Result<Vec<Unit>, PipelineError> {
        let t = &self.config.thresholds;
        self.collect(manifests, |m| {
            let mut h = InputHash::new(Stage::Clean);
            h.json("manifest", m);
            for f in m.input_files() {
                let digest = std::fs::read(&f)
                    .map(|b| sha256_hex(&b))
                    .unwrap_or_default();
                h.add("file", digest.as_bytes());
            }
            h.json(
                "thresholds",
                &(
                    t.overexposed_intensity,
                    t.overexposed_fraction,
                    t.scene_overexposed_fraction,
                    t.frame_target,
                    t.frame_cap,
                    t.pose_cluster,
                    t.view_beta,
                    t.face_grid,
                ),
            );
            let excluded: Vec<&(String, String)> = self
                .exclusions
                .frames
                .iter()
                .filter(|(s, _)| *s == m.scene_id)
                .collect();
            h.json(
                "exclusions",
                &(self.exclusions.scenes.contains(&m.scene_id), excluded),
            );
            h.add("out", self.out.to_string_lossy().as_bytes());
            let input = h.finish();
            self.unit(Stage::Clean, &m.scene_id, input, || self.clean_scene(m))
                .map(Some)
        })
    }

    fn clean_scene(&self, m: &SceneManifest) -> Result<Computed, PipelineError> {
        let t = &self.config.thresholds;
        let scene_id = &m.scene_id;
        let mut scene = CleanScene {
            scene_id: scene_id.clone(),
            source: m.source.clone(),
            dropped: None,
            objects: Vec::new(),
            frames: Vec::new(),
            visibility: BTreeMap::new(),
            views: BTreeMap::new(),
            diagnostics: CleanDiagnostics::default(),
        };
        let mut outputs: Vec<(String, Vec<u8>)> = Vec::new();
        if self.exclusions.scenes.contains(scene_id) {
            scene.dropped = Some("excluded".into());
            outputs.push((rel_clean(scene_id), to_json(&scene)));
            return Ok((outputs, Vec::new()));
        }
        let diag = &mut scene.diagnostics;

        let mut frames: Vec<CameraFrame> = Vec::new();
        for f in &m.frames {
            if self
                .exclusions
                .frames
                .contains(&(scene_id.clone(), f.frame_id.clone()))
            {
                diag.excluded_frames.push(f.frame_id.clone());
            } else if let Err(e) = f.validate() {
                diag.frame_notes.insert(f.frame_id.clone(), e.to_string());
            } else {
                frames.push(f.clone());
            }
        }
        let sampled = sample_frames(&frames, m.is_video, t.frame_target, &t.pose_cluster);
        diag.sampled_frames = sampled.len();
        let mut kept: Vec<(&CameraFrame, GrayImage)> = Vec::new();
        for &i in &sampled {
            let f = &frames[i];
            let verdict = GrayImage::load(&f.image).and_then(|img| {
                is_overexposed(&img, t.overexposed_intensity, t.overexposed_fraction)
                    .map(|o| (img, o))
            });
            match verdict {
                Ok((_, true)) => diag.overexposed_frames.push(f.frame_id.clone()),
                Ok((img, false)) => kept.push((f, img)),
                Err(e) => {
                    diag.frame_notes.insert(f.frame_id.clone(), e.to_string());
                }
            }
        }
        let over = diag.overexposed_frames.len();
        if !sampled.is_empty() && over as f64 / sampled.len() as f64 > t.scene_overexposed_fraction
        {
            scene.dropped = Some(format!(
                "overexposed: {over} of {} sampled frames",
                sampled.len()
            ));
            outputs.push((rel_clean(scene_id), to_json(&scene)));
            return Ok((outputs, Vec::new()));
        }

        // Boxes plus the points used for visibility.
        let mut samples: BTreeMap<ObjectId, Vec<Point3>> = BTreeMap::new();
        for o in &m.objects {
            let fitted: Result<(Obb7, Vec<Point3>), String> = match (&o.points, &o.obb) {
                (Some(p), _) => super::load_points(p).and_then(|c| {
                    fit_obb7(&c)
                        .map(|b| (b, c.points))
                        .map_err(|e| e.to_string())
                }),
                (None, Some(b)) => Obb7::new(
                    Point3::new(b.center[0], b.center[1], b.center[2]),
                    b.size,
                    b.yaw,
                )
                .map_err(|e| e.to_string())
                .and_then(|obb| {
                    sample_face_points(&obb, t.face_grid)
                        .map(|p| (obb, p))
                        .map_err(|e| e.to_string())
                }),
                (None, None) => Err("no geometry".into()),
            };
            match fitted {
                Err(e) => {
                    diag.dropped_objects.insert(o.id, e);
                }
                Ok((obb, pts)) => {
                    let label = o
                        .label
                        .as_deref()
                        .filter(|l| !l.trim().is_empty())
                        .and_then(|l| normalize_label(l).ok());
                    samples.insert(o.id, pts);
                    scene.objects.push(CleanObject {
                        id: o.id,
                        label,
                        obb: round_obb(obb),
                        from_points: o.points.is_some(),
                        attributes: o.attributes.clone(),
                        caption: o.caption.clone().filter(|c| !c.trim().is_empty()),
                    });
                }
            }
        }

        let mut table: VisibilityTable = BTreeMap::new();
        for (f, img) in &kept {
            let dims = (img.width, img.height);
            let depth = match &f.depth {
                None => None,
                Some(p) => match DepthMap::load(p, f.depth_format, dims) {
                    Ok(d) if (d.width, d.height) == dims => Some(d),
                    Ok(d) => {
                        let note = format!(
                            "depth is {}x{}, image is {}x{}",
                            d.width, d.height, dims.0, dims.1
                        );
                        diag.frame_notes.insert(f.frame_id.clone(), note);
                        None
                    }
                    Err(e) => {
                        diag.frame_notes
                            .insert(f.frame_id.clone(), format!("depth: {e}"));
                        None
                    }
                },
            };
            let boxes: BTreeMap<ObjectId, Box2> = scene
                .objects
                .iter()
                .filter(|o| !o.from_points)
                .filter_map(|o| projected_box(f, &o.obb, o.id, dims).map(|b| (o.id, b)))
                .collect();
            let label_map = depth.as_ref().map(|d| {
                let list: Vec<Box2> = boxes.values().copied().collect();
                depth_label_map(&list, d)
            });
            let mut row = BTreeMap::new();
            for o in &scene.objects {
                let ratio = if o.from_points {
                    visible_ratio(&samples[&o.id], f, dims, depth.as_ref())
                } else if let Some(lm) = &label_map {
                    boxes.get(&o.id).map_or(0.0, |b| label_map_ratio(b, lm))
                } else {
                    visible_ratio(&samples[&o.id], f, dims, None)
                };
                let ratio = round6(ratio);
                if ratio > 0.0 {
                    row.insert(o.id, ratio);
                }
            }
            table.insert(f.frame_id.clone(), row);
        }

        let cover: Vec<(String, BTreeSet<ObjectId>)> = table
            .iter()
            .map(|(f, row)| (f.clone(), row.keys().copied().collect()))
            .collect();
        let selected: BTreeSet<String> = max_coverage_frames(&cover, t.frame_cap)
            .into_iter()
            .collect();
        table.retain(|f, _| selected.contains(f));

        for (f, img) in kept.iter().filter(|(f, _)| selected.contains(&f.frame_id)) {
            let decision = canonicalize_rotation(f);
            let mut frame = (*f).clone();
            let (mut width, mut height) = (img.width, img.height);
            if decision.rotation != Rotation::R0 {
                let rotated = rotate_gray(img, decision.rotation);
                let rel = format!(
                    "clean/frames/{}/{}.png",
                    sanitize(scene_id),
                    sanitize(&f.frame_id)
                );
                frame = rotate_frame(f, decision.rotation, img.width, img.height);
                frame.image = self.out.join(&rel);
                frame.depth = None;
                (width, height) = (rotated.width, rotated.height);
                outputs.push((rel, png_gray(&rotated)));
            }
            scene.frames.push(CleanFrame {
                frame,
                width,
                height,
                rotation_deg: decision.rotation.degrees(),
                pose_degenerate: decision.pose_degenerate,
            });
        }

        for o in &scene.objects {
            let stats: Vec<ViewStat> = kept
                .iter()
                .filter_map(|(f, img)| {
                    let ratio = *table.get(&f.frame_id)?.get(&o.id)?;
                    let (u, v, _) = f.project(o.obb.center)?;
                    Some(ViewStat {
                        frame_id: f.frame_id.clone(),
                        center: (u, v),
                        area_ratio: ratio,
                        image_size: (img.width, img.height),
                    })
                })
                .collect();
            let mut ranked = rank_object_views(&stats, t.view_beta);
            ranked.truncate(TOP_VIEWS);
            for r in &mut ranked {
                r.score = round6(r.score);
            }
            if !ranked.is_empty() {
                scene.views.insert(o.id, ranked);
            }
        }
        scene.visibility = table;
        outputs.push((rel_clean(scene_id), to_json(&scene)));
        Ok((outputs, Vec::new()))
    }

    fn load_clean(
        &self,
        stage: Stage,
        scene: &str,
    ) -> Result<(CleanScene, Vec<u8>), PipelineError> {
        let rel = rel_clean(scene);
        let bytes = self.read_artifact(stage, Stage::Clean, &rel)?;
        Ok((self.parse_artifact(stage, &rel, &bytes)?, bytes))
    }

    fn load_view(&self, stage: Stage, scene: &str) -> Result<Option<SceneView>, PipelineError> {
        let (clean, clean_bytes) = self.load_clean(stage, scene)?;
        if clean.dropped.is_some() {
            return Ok(None);
        }
        let rel = rel_annotate(scene);
        let ann_bytes = std::fs::read(self.out.join(&rel)).ok();
        let ann: Option<Annotations> = match &ann_bytes {
            Some(b) => Some(self.parse_artifact(stage, &rel, b)?),
            None => None,
        };
        let digest =
            sha256_hex(&clean_bytes) + &ann_bytes.as_deref().map(sha256_hex).unwrap_or_default();
        let mut labels: BTreeMap<ObjectId, String> = clean
            .objects
            .iter()
            .filter_map(|o| Some((o.id, o.label.clone()?)))
            .collect();
        let (attributes, captions) = match ann {
            Some(a) => {
                for (id, l) in a.labels {
                    labels.entry(id).or_insert(l);
                }
                (a.attributes, a.captions)
            }
            None => {
                let attributes = clean
                    .objects
                    .iter()
                    .filter_map(|o| Some((o.id, o.attributes.clone()?)))
                    .collect();
                let objects = clean
                    .objects
                    .iter()
                    .filter_map(|o| {
                        Some(ObjectCaption {
                            object_id: o.id,
                            caption: o.caption.clone()?,
                            views: view_ids(&clean, o.id),
                        })
                    })
                    .collect();
                (
                    attributes,
                    CaptionSet {
                        scene: None,
                        frames: Vec::new(),
                        objects,
                    },
                )
            }
        };
        Ok(Some(SceneView {
            clean,
            labels,
            attributes,
            captions,
            digest,
        }))
    }

    // ---- annotate -------------------------------------------------------

    pub(crate) fn stage_annotate(
        &self,
        manifests: &[SceneManifest],
    ) -> Result<Vec<Unit>, PipelineError> {
        let n_images = self.config.thresholds.scene_caption_images;
        self.collect(manifests, |m| {
            let (clean, bytes) = self.load_clean(Stage::Annotate, &m.scene_id)?;
            if clean.dropped.is_some() {
                return Ok(None);
            }
            let mut h = InputHash::new(Stage::Annotate);
            h.add("clean", sha256_hex(&bytes).as_bytes());
            for f in &clean.frames {
                let digest = std::fs::read(&f.frame.image)
                    .map(|b| sha256_hex(&b))
                    .unwrap_or_default();
                h.add("image", digest.as_bytes());
            }
            h.add(
                "annotation",
                self.fingerprints[&Role::Annotation].as_bytes(),
            );
            h.add(
                "attributes",
                self.fingerprints[&Role::Attributes].as_bytes(),
            );
            h.json("scene_caption_images", &n_images);
            let input = h.finish();
            self.unit(Stage::Annotate, &m.scene_id, input, || {
                self.annotate_scene(&clean)
            })
            .map(Some)
        })
    }

    /// Box-drawn copy of a frame for one or two objects.
    fn render_boxes(
        &self,
        stage: Stage,
        clean: &CleanScene,
        frame_id: &str,
        objects: &[(ObjectId, [u8; 3])],
        rel: &str,
    ) -> Result<ImageRef, String> {
        let f = clean
            .frames
            .iter()
            .find(|f| f.frame.frame_id == frame_id)
            .ok_or_else(|| format!("unknown frame {frame_id}"))?;
        let img = GrayImage::load(&f.frame.image).map_err(|e| e.to_string())?;
        let boxes: Vec<(Box2, [u8; 3])> = objects
            .iter()
            .filter_map(|(id, color)| {
                let o = clean.objects.iter().find(|o| o.id == *id)?;
                Some((
                    projected_box(&f.frame, &o.obb, *id, (f.width, f.height))?,
                    *color,
                ))
            })
            .collect();
        if boxes.len() != objects.len() {
            return Err(format!("object box outside frame {frame_id}"));
        }
        self.write(stage, rel, &png_rgb(&draw_boxes(&img, &boxes)))
            .map_err(|e| e.to_string())?;
        ImageRef::from_file(&self.out.join(rel)).map_err(|e| e.to_string())
    }

    fn annotate_scene(&self, clean: &CleanScene) -> Result<Computed, PipelineError> {
        let scene_id = &clean.scene_id;
        let oracle = self.client(Role::Annotation);
        let attr_oracle = self.client(Role::Attributes);
        let mut failures: Vec<String> = Vec::new();
        let mut images: Vec<(&CleanFrame, ImageRef)> = Vec::new();
        for f in &clean.frames {
            match ImageRef::from_file(&f.frame.image) {
                Ok(r) => images.push((f, r)),
                Err(e) => failures.push(format!("{scene_id}/{}: {e}", f.frame.frame_id)),
            }
        }

        let mut captions = CaptionSet::default();
        if !images.is_empty() {
            let refs: Vec<ImageRef> = images
                .iter()
                .take(self.config.thresholds.scene_caption_images)
                .map(|(_, r)| r.clone())
                .collect();
            match oracle.ask("scene_annotation", BTreeMap::new(), refs, nonempty) {
                Ok(r) => captions.scene = Some(r.value),
                Err(e) => failures.push(format!("{scene_id}: scene caption: {e}")),
            }
        }
        let frame_caps = map_bounded(&images, self.concurrency(Role::Annotation), |(_, r)| {
            oracle.ask(
                "frame_annotation",
                BTreeMap::new(),
                vec![r.clone()],
                nonempty,
            )
        });
        for ((f, _), res) in images.iter().zip(frame_caps) {
            match res {
                Ok(r) => captions.frames.push(FrameCaption {
                    frame_id: f.frame.frame_id.clone(),
                    caption: r.value,
                    pose: f.frame.pose,
                    intrinsics: f.frame.intrinsics,
                }),
                Err(e) => failures.push(format!(
                    "{scene_id}/{}: frame caption: {e}",
                    f.frame.frame_id
                )),
            }
        }

        struct ObjectNotes {
            label: Option<(String, bool)>,
            caption: Option<String>,
            attributes: Option<AppearanceAttributes>,
            failures: Vec<String>,
        }
        let categories = nyu40().join(", ");
        let notes = map_bounded(&clean.objects, self.concurrency(Role::Annotation), |o| {
            let mut n = ObjectNotes {
                label: o.label.clone().map(|l| (l, false)),
                caption: o.caption.clone(),
                attributes: o.attributes.clone(),
                failures: Vec::new(),
            };
            let views = view_ids(clean, o.id);
            let mut refs = Vec::new();
            for v in &views {
                let rel = format!(
                    "annotate/views/{}/{}_{}.png",
                    sanitize(scene_id),
                    o.id,
                    sanitize(v)
                );
                match self.render_boxes(Stage::Annotate, clean, v, &[(o.id, SUBJECT_COLOR)], &rel) {
                    Ok(r) => refs.push(r),
                    Err(e) => n
                        .failures
                        .push(format!("{scene_id}/{}: view {v}: {e}", o.id)),
                }
            }
            if n.label.is_none() && !refs.is_empty() {
                let asked = oracle.ask(
                    "object_category",
                    bindings([("Categories", categories.as_str())]),
                    refs.clone(),
                    parse_category,
                );
                match asked {
                    Ok(r) => n.label = normalize_label(&r.value).ok().map(|l| (l, true)),
                    Err(e) => n
                        .failures
                        .push(format!("{scene_id}/{}: category: {e}", o.id)),
                }
            }
            if let (None, Some((label, _)), false) = (&n.caption, &n.label, refs.is_empty()) {
                let asked = oracle.ask(
                    "object_annotation",
                    bindings([("ObjectLabel", label.as_str())]),
                    refs.clone(),
                    parse_object_annotation,
                );
                match asked {
                    Ok(r) => n.caption = r.value,
                    Err(e) => n
                        .failures
                        .push(format!("{scene_id}/{}: caption: {e}", o.id)),
                }
            }
            if let (None, Some(caption), Some((label, _))) = (&n.attributes, &n.caption, &n.label) {
                let asked = attr_oracle.ask(
                    "attribute_extraction",
                    bindings([
                        ("ObjectLabel", label.as_str()),
                        ("Caption", caption.as_str()),
                    ]),
                    vec![],
                    parse_attributes,
                );
                match asked {
                    Ok(r) => n.attributes = Some(r.value),
                    Err(e) => n
                        .failures
                        .push(format!("{scene_id}/{}: attributes: {e}", o.id)),
                }
            }
            n
        });

        let mut ann = Annotations {
            scene_id: scene_id.clone(),
            ..Default::default()
        };
        for (o, n) in clean.objects.iter().zip(notes) {
            if let Some((label, true)) = n.label {
                ann.labels.insert(o.id, label);
            }
            if let Some(c) = n.caption {
                captions.objects.push(ObjectCaption {
                    object_id: o.id,
                    caption: c,
                    views: view_ids(clean, o.id),
                });
            }
            if let Some(a) = n.attributes {
                ann.attributes.insert(o.id, a);
            }
            failures.extend(n.failures);
        }
        ann.captions = captions;
        ann.failures = failures.clone();
        Ok((vec![(rel_annotate(scene_id), to_json(&ann))], failures))
    }

    // ---- graph ----------------------------------------------------------

    pub(crate) fn stage_graph(
        &self,
        manifests: &[SceneManifest],
    ) -> Result<Vec<Unit>, PipelineError> {
        let views: Vec<SceneView> =
            self.collect(manifests, |m| self.load_view(Stage::Graph, &m.scene_id))?;
        let labels: BTreeSet<String> = views
            .iter()
            .flat_map(|v| v.labels.values().cloned())
            .collect();

        let mut h = InputHash::new(Stage::Graph);
        h.json("labels", &labels);
        h.add("oracle", self.fingerprints[&Role::LabelGraph].as_bytes());
        let input = h.finish();
        let label_unit = self.unit(Stage::Graph, "label_graph", input, || {
            let (graph, build) = cached_label_graph(
                &self.cache,
                &labels,
                self.client(Role::LabelGraph),
                self.concurrency(Role::LabelGraph),
            )
            .map_err(|e| PipelineError::Input {
                stage: Stage::Graph,
                path: self.cache.clone(),
                reason: e.to_string(),
            })?;
            let failures = build
                .as_ref()
                .map(|b| {
                    b.skipped
                        .iter()
                        .map(|(u, v, why)| format!("label edge {u} -> {v}: {why}"))
                        .collect()
                })
                .unwrap_or_default();
            let artifact = LabelGraphArtifact {
                label_set_sha256: label_set_hash(&labels),
                graph,
                build,
            };
            Ok((
                vec![(REL_LABEL_GRAPH.to_string(), to_json(&artifact))],
                failures,
            ))
        })?;
        let graph_bytes = match label_unit.outputs.first() {
            Some((_, b)) => b.clone(),
            None => self.read_artifact(Stage::Graph, Stage::Graph, REL_LABEL_GRAPH)?,
        };
        let artifact: LabelGraphArtifact =
            self.parse_artifact(Stage::Graph, REL_LABEL_GRAPH, &graph_bytes)?;
        let graph = artifact.graph;
        let vocab = match &self.config.relation_predicates {
            Some(p) => RelationVocabulary::new(p.clone())
                .map_err(|e| PipelineError::Config(e.to_string()))?,
            None => RelationVocabulary::default(),
        };
        let graph_digest = sha256_hex(&graph_bytes);

        let scene_units: Vec<Result<Unit, PipelineError>> = self.pool.install(|| {
            views
                .par_iter()
                .map(|v| {
                    let mut h = InputHash::new(Stage::Graph);
                    h.add("view", v.digest.as_bytes());
                    h.add("label_graph", graph_digest.as_bytes());
                    h.json("relations", &self.config.thresholds.relations);
                    h.json("vocabulary", &vocab.predicates());
                    h.add(
                        "judgment",
                        self.fingerprints[&Role::RelationJudgment].as_bytes(),
                    );
                    h.add(
                        "extraction",
                        self.fingerprints[&Role::RelationExtraction].as_bytes(),
                    );
                    let input = h.finish();
                    self.unit(Stage::Graph, &v.clean.scene_id, input, || {
                        self.graph_scene(v, &graph, &vocab)
                    })
                })
                .collect()
        });
        let mut units = vec![label_unit];
        for u in scene_units {
            units.push(u?);
        }
        Ok(units)
    }

    fn graph_scene(
        &self,
        v: &SceneView,
        graph: &LabelGraph,
        vocab: &RelationVocabulary,
    ) -> Result<Computed, PipelineError> {
        let scene_id = &v.clean.scene_id;
        let labels: BTreeMap<ObjectId, String> = v
            .labels
            .iter()
            .map(|(id, l)| (*id, graph.canonical(l).to_string()))
            .collect();
        let named: Vec<(ObjectId, String)> =
            labels.iter().map(|(id, l)| (*id, l.clone())).collect();
        let grouping = group_distractors(&named, graph);
        let boxes: Vec<(ObjectId, Obb7)> = v
            .clean
            .objects
            .iter()
            .filter(|o| labels.contains_key(&o.id))
            .map(|o| (o.id, o.obb))
            .collect();
        let initial = build_initial_graph(&boxes, &self.config.thresholds.relations);
        let render = |frame: &str, a: ObjectId, b: ObjectId| -> Option<ImageRef> {
            let rel = format!(
                "graph/views/{}/{}_{a}_{b}.png",
                sanitize(scene_id),
                sanitize(frame)
            );
            self.render_boxes(
                Stage::Graph,
                &v.clean,
                frame,
                &[(a, SUBJECT_COLOR), (b, OBJECT_COLOR)],
                &rel,
            )
            .map_err(|e| log::debug!("{scene_id}: {e}"))
            .ok()
        };
        let corrector = Corrector {
            mllm: self.client(Role::RelationJudgment),
            llm: self.client(Role::RelationExtraction),
            vocabulary: vocab,
            labels: &labels,
            visibility: &v.clean.visibility,
            render: &render,
            concurrency: self.concurrency(Role::RelationJudgment),
        };
        let (corrected, report) = corrector.correct(&initial);
        let failures = report
            .failed
            .iter()
            .map(|(s, p, o, why)| format!("{scene_id}: {s} {p} {o}: {why}"))
            .collect();
        let groups = SceneGroups {
            scene_id: scene_id.clone(),
            labels,
            grouping,
            rule_triples: initial.len(),
            correction: report,
        };
        Ok((
            vec![
                (rel_groups(scene_id), to_json(&groups)),
                (rel_scene_graph(scene_id), corrected.to_jsonl().into_bytes()),
            ],
            failures,
        ))
    }

    fn load_groups(
        &self,
        stage: Stage,
        scene: &str,
    ) -> Result<(SceneGroups, SceneGraph, String), PipelineError> {
        let rel = rel_groups(scene);
        let gb = self.read_artifact(stage, Stage::Graph, &rel)?;
        let groups: SceneGroups = self.parse_artifact(stage, &rel, &gb)?;
        let rel_sg = rel_scene_graph(scene);
        let sb = self.read_artifact(stage, Stage::Graph, &rel_sg)?;
        let sg = SceneGraph::from_jsonl(&String::from_utf8_lossy(&sb)).map_err(|e| {
            PipelineError::Input {
                stage,
                path: self.out.join(&rel_sg),
                reason: e.to_string(),
            }
        })?;
        Ok((groups, sg, sha256_hex(&gb) + &sha256_hex(&sb)))
    }

    // ---- refer ----------------------------------------------------------

    pub(crate) fn stage_refer(
        &self,
        manifests: &[SceneManifest],
    ) -> Result<Vec<Unit>, PipelineError> {
        let t = &self.config.thresholds;
        let seed = self.config.seed;
        self.collect(manifests, |m| {
            let Some(v) = self.load_view(Stage::Refer, &m.scene_id)? else {
                return Ok(None);
            };
            let (groups, sg, digest) = self.load_groups(Stage::Refer, &m.scene_id)?;
            let mut h = InputHash::new(Stage::Refer);
            h.add("view", v.digest.as_bytes());
            h.add("graph", digest.as_bytes());
            h.json(
                "params",
                &(
                    t.size_tau,
                    t.relation_proximity,
                    t.subset_cap,
                    t.anchor_min_distance,
                    t.sight_min_separation,
                    t.sight_margin_deg,
                    t.max_anchors,
                    t.max_sights,
                    t.rewrite_referrals,
                ),
            );
            h.json("seed", &seed);
            h.add("oracle", self.fingerprints[&Role::Referring].as_bytes());
            let input = h.finish();
            self.unit(Stage::Refer, &m.scene_id, input, || {
                let objects: Vec<ReferObject> = v
                    .clean
                    .objects
                    .iter()
                    .filter_map(|o| {
                        Some(ReferObject {
                            id: o.id,
                            label: groups.labels.get(&o.id)?.clone(),
                            obb: o.obb,
                            attributes: v.attributes.get(&o.id).cloned().unwrap_or_default(),
                            caption: caption_of(&v.captions, o.id),
                        })
                    })
                    .collect();
                let (set, report) = refer_scene(
                    &m.scene_id,
                    &objects,
                    &groups.grouping.groups,
                    &sg,
                    self.client(Role::Referring),
                    &t.refer_params(),
                    seed,
                    self.concurrency(Role::Referring),
                );
                let failures = report
                    .appearance_failures
                    .iter()
                    .map(|f| format!("{}: {f}", m.scene_id))
                    .collect();
                let summary = SceneReferrals {
                    scene_id: m.scene_id.clone(),
                    report,
                    flagged: set.flagged.clone(),
                    undescribed: set.undescribed.clone(),
                };
                Ok((
                    vec![
                        (rel_referrals(&m.scene_id), set.to_jsonl().into_bytes()),
                        (rel_refer_report(&m.scene_id), to_json(&summary)),
                    ],
                    failures,
                ))
            })
            .map(Some)
        })
    }

    // ---- generate -------------------------------------------------------

    pub(crate) fn stage_generate(
        &self,
        manifests: &[SceneManifest],
    ) -> Result<Vec<Unit>, PipelineError> {
        struct Ready {
            view: SceneView,
            groups: SceneGroups,
            referrals: ReferralSet,
            digest: String,
        }
        let stage = Stage::Generate;
        let ready: Vec<Ready> = self.collect(manifests, |m| {
            let Some(view) = self.load_view(stage, &m.scene_id)? else {
                return Ok(None);
            };
            let (groups, _, gdigest) = self.load_groups(stage, &m.scene_id)?;
            let rel = rel_referrals(&m.scene_id);
            let rb = self.read_artifact(stage, Stage::Refer, &rel)?;
            let referrals =
                ReferralSet::from_jsonl(&String::from_utf8_lossy(&rb)).map_err(|e| {
                    PipelineError::Input {
                        stage,
                        path: self.out.join(&rel),
                        reason: e.to_string(),
                    }
                })?;
            let rel_s = rel_refer_report(&m.scene_id);
            let sb = self.read_artifact(stage, Stage::Refer, &rel_s)?;
            let summary: SceneReferrals = self.parse_artifact(stage, &rel_s, &sb)?;
            let digest = [
                view.digest.clone(),
                gdigest,
                sha256_hex(&rb),
                sha256_hex(&sb),
            ]
            .concat();
            Ok(Some(Ready {
                view,
                groups,
                referrals: ReferralSet {
                    referrals,
                    flagged: summary.flagged,
                    undescribed: summary.undescribed,
                },
                digest,
            }))
        })?;
        let lg_bytes = self.read_artifact(stage, Stage::Graph, REL_LABEL_GRAPH)?;
        let label_graph = self
            .parse_artifact::<LabelGraphArtifact>(stage, REL_LABEL_GRAPH, &lg_bytes)?
            .graph;

        let seed = self.config.seed;
        let generation = &self.config.generation;
        let config_hash = {
            let mut h = InputHash::new(stage);
            h.json("generation", generation);
            h.json("thresholds", &self.config.thresholds);
            h.json("predicates", &self.config.relation_predicates);
            h.finish()
        };
        let mut h = InputHash::new(stage);
        for r in &ready {
            h.add(&r.view.clean.scene_id, r.digest.as_bytes());
        }
        h.add("label_graph", sha256_hex(&lg_bytes).as_bytes());
        h.add("config", config_hash.as_bytes());
        h.json("seed", &seed);
        h.add("oracle", self.fingerprints[&Role::Attributes].as_bytes());
        let input = h.finish();
        let unit = self.unit(stage, "dataset", input, || {
            let oracle = self.client(Role::Attributes);
            let per_scene: Vec<Vec<taskgen::QaSample>> = self.pool.install(|| {
                ready
                    .par_iter()
                    .map(|r| {
                        let objects: Vec<TaskObject> = r
                            .view
                            .clean
                            .objects
                            .iter()
                            .filter_map(|o| {
                                Some(TaskObject {
                                    id: o.id,
                                    label: r.groups.labels.get(&o.id)?.clone(),
                                    obb: o.obb,
                                    attributes: r
                                        .view
                                        .attributes
                                        .get(&o.id)
                                        .cloned()
                                        .unwrap_or_default(),
                                })
                            })
                            .collect();
                        let inputs = SceneInputs {
                            scene_id: &r.view.clean.scene_id,
                            objects: &objects,
                            referrals: &r.referrals,
                            label_graph: &label_graph,
                            captions: &r.view.captions,
                        };
                        generate_scene(&inputs, generation, oracle, seed)
                    })
                    .collect()
            });
            let samples =
                balance_and_cap(per_scene.into_iter().flatten().collect(), generation, seed);
            let manifest = DatasetManifest::new(&samples, &config_hash, seed);
            Ok((
                vec![
                    (
                        "dataset.jsonl".to_string(),
                        taskgen::to_jsonl(&samples).into_bytes(),
                    ),
                    ("dataset_manifest.json".to_string(), to_json(&manifest)),
                ],
                Vec::new(),
            ))
        })?;
        Ok(vec![unit])
    }

    // ---- reports --------------------------------------------------------

    /// Summarizes a stage from its committed artifacts.
    pub(crate) fn write_report(
        &self,
        stage: Stage,
        manifests: &[SceneManifest],
    ) -> Result<(), PipelineError> {
        let read = |rel: &str| -> Option<Value> {
            std::fs::read(self.out.join(rel))
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok())
        };
        let mut scenes = serde_json::Map::new();
        for m in manifests {
            let id = &m.scene_id;
            let entry = match stage {
                Stage::Clean => read(&rel_clean(id)).map(|c| {
                    json!({
                        "dropped": c["dropped"],
                        "objects": c["objects"].as_array().map_or(0, Vec::len),
                        "frames": c["frames"].as_array().map_or(0, Vec::len),
                        "diagnostics": c["diagnostics"],
                    })
                }),
                Stage::Annotate => {
                    read(&rel_annotate(id)).map(|a| json!({ "failures": a["failures"] }))
                }
                Stage::Graph => read(&rel_groups(id)).map(|g| {
                    json!({
                        "groups": g["grouping"]["groups"].as_array().map_or(0, Vec::len),
                        "multi_group": g["grouping"]["multi_group"],
                        "rule_triples": g["rule_triples"],
                        "correction": g["correction"],
                    })
                }),
                Stage::Refer => read(&rel_refer_report(id)),
                Stage::Generate => None,
            };
            if let Some(e) = entry {
                scenes.insert(id.clone(), e);
            }
        }
        let report = match stage {
            Stage::Generate => read("dataset_manifest.json").unwrap_or(Value::Null),
            Stage::Graph => json!({
                "label_graph": read(REL_LABEL_GRAPH).map(|g| g["build"].clone()),
                "scenes": scenes,
            }),
            _ => json!({ "scenes": scenes }),
        };
        self.write(stage, &format!("reports/{stage}.json"), &to_json(&report))
    }
}

fn view_ids(clean: &CleanScene, id: ObjectId) -> Vec<String> {
    clean
        .views
        .get(&id)
        .map(|v| v.iter().map(|r| r.frame_id.clone()).collect())
        .unwrap_or_default()
}

fn caption_of(captions: &CaptionSet, id: ObjectId) -> Option<String> {
    captions
        .objects
        .iter()
        .find(|c| c.object_id == id)
        .map(|c| c.caption.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_annotation_replies() {
        assert_eq!(
            parse_object_annotation("YES. A wooden chair with armrests.").unwrap(),
            Some("A wooden chair with armrests.".to_string())
        );
        assert_eq!(parse_object_annotation("No").unwrap(), None);
        assert!(parse_object_annotation("maybe").is_err());
    }

    #[test]
    fn categories_come_from_the_list() {
        assert_eq!(parse_category(" Night Stand.").unwrap(), "night stand");
        assert!(parse_category("spaceship").is_err());
        assert_eq!(nyu40().len(), 40);
    }

    #[test]
    fn attribute_json_is_lenient_about_wrapping() {
        let a = parse_attributes("Here: {\"color\": \"Red\", \"material\": null, \"shape\": \"\"}")
            .unwrap();
        assert_eq!(a.color.as_deref(), Some("red"));
        assert!(a.material.is_none() && a.shape.is_none() && a.condition.is_none());
        assert!(parse_attributes("{\"color\": 3}").is_err());
    }
}
