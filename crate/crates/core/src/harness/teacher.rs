//! Frozen, randomly initialized reference network whose embeddings serve
//! as distillation targets.

use std::collections::BTreeMap;

use boxseg_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{CaseRecord, ImageLayout, Npz, NpyArray, NpyData};
use crate::error::{CoreError, Result};
use crate::model::layers::{conv, ln2d};
use crate::model::{Ctx, Init, ParamSpec, ParamStore};
use crate::preprocess::prepare_case;

/// Pre-computed embeddings keyed by [`teacher_key`].
pub type TeacherStore = BTreeMap<String, Tensor>;

/// `id` for 2-D cases, `id/slice` for volume slices.
pub fn teacher_key(id: &str, slice: Option<usize>) -> String {
    match slice {
        Some(s) => format!("{id}/{s}"),
        None => id.to_string(),
    }
}

/// Two stride-2 4×4 convolutions, a 1×1 projection and a channel layer
/// norm with random affine terms; output stride 4.
#[derive(Clone, Debug)]
pub struct RandomTeacher {
    pub embed_dim: usize,
    params: ParamStore,
}

const HIDDEN: [usize; 2] = [16, 32];

impl RandomTeacher {
    pub fn new(embed_dim: usize, seed: u64) -> Self {
        let he = |fan_in: usize| Init::Normal((2.0 / fan_in as f64).sqrt());
        let spec = |name: &str, shape: Vec<usize>, init| ParamSpec { name: name.into(), shape, init, trainable: false };
        let specs = vec![
            spec("teacher.conv1.weight", vec![HIDDEN[0], 3, 4, 4], he(48)),
            spec("teacher.conv1.bias", vec![HIDDEN[0]], Init::Normal(0.1)),
            spec("teacher.conv2.weight", vec![HIDDEN[1], HIDDEN[0], 4, 4], he(16 * HIDDEN[0])),
            spec("teacher.conv2.bias", vec![HIDDEN[1]], Init::Normal(0.1)),
            spec("teacher.conv3.weight", vec![embed_dim, HIDDEN[1], 1, 1], he(HIDDEN[1])),
            spec("teacher.conv3.bias", vec![embed_dim], Init::Zeros),
            spec("teacher.ln.weight", vec![embed_dim], Init::Normal(0.5)),
            spec("teacher.ln.bias", vec![embed_dim], Init::Normal(0.5)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::init(&specs, &mut rng);
        let gamma = params.get_mut("teacher.ln.weight").expect("declared above");
        gamma.value = gamma.value.map(|v| 1.0 + v);
        Self { embed_dim, params }
    }

    /// `[3, S, S] → [E, S/4, S/4]`.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let g = Graph::no_grad();
        let cx = Ctx::new(&g, &self.params, false);
        let x = g.constant(image.clone());
        let x = g.gelu(&conv(&cx, "teacher.conv1", &x, 2, 1, true)?);
        let x = g.gelu(&conv(&cx, "teacher.conv2", &x, 2, 1, true)?);
        let x = conv(&cx, "teacher.conv3", &x, 1, 0, true)?;
        Ok(ln2d(&cx, "teacher.ln", &x)?.to_tensor())
    }
}

/// Teacher embeddings for every 2-D case and every slice of every volume.
pub fn build_teacher_store(teacher: &RandomTeacher, cases: &[CaseRecord], size: usize) -> Result<TeacherStore> {
    let mut store = TeacherStore::new();
    for case in cases {
        if case.layout == ImageLayout::Volume {
            for s in 0..case.depth() {
                let p = prepare_case(case, Some(s), size)?;
                store.insert(teacher_key(&case.id, Some(s)), teacher.embed(&p.image)?);
            }
        } else {
            let p = prepare_case(case, None, size)?;
            store.insert(teacher_key(&case.id, None), teacher.embed(&p.image)?);
        }
    }
    Ok(store)
}

pub fn teacher_lookup<'a>(store: &'a TeacherStore, id: &str, slice: Option<usize>) -> Result<&'a Tensor> {
    let key = teacher_key(id, slice);
    store.get(&key).ok_or_else(|| CoreError::Data(format!("no teacher embedding for case '{key}'")))
}

/// Reads `embedding` arrays from every `.npz` in `dir`; the file stem is
/// the key (use `id__slice` for volume slices).
pub fn read_teacher_dir(dir: &std::path::Path) -> Result<TeacherStore> {
    let mut store = TeacherStore::new();
    for path in crate::dataio::list_cases(dir)? {
        let npz = Npz::read(&path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let key = match stem.rsplit_once("__") {
            Some((id, s)) if s.parse::<usize>().is_ok() => format!("{id}/{s}"),
            _ => stem,
        };
        let arr = npz
            .get("embedding")
            .ok_or_else(|| CoreError::Data(format!("{}: missing 'embedding' entry", path.display())))?;
        if arr.shape.len() != 3 {
            return Err(CoreError::Data(format!("{}: embedding must be [C, H, W]", path.display())));
        }
        store.insert(key, Tensor::new(arr.shape.clone(), arr.data.to_f32())?);
    }
    Ok(store)
}

/// Writes one `.npz` per entry, the inverse of [`read_teacher_dir`].
pub fn write_teacher_dir(store: &TeacherStore, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    for (key, t) in store {
        let mut npz = Npz::new();
        npz.insert("embedding", NpyArray::new(t.shape().to_vec(), NpyData::F32(t.data().to_vec())));
        npz.write(&dir.join(format!("{}.npz", key.replace('/', "__"))))?;
    }
    Ok(())
}
