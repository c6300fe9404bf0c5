//! Inference-time translation and KID evaluation of a trained model.
//!
//! Guidance at inference comes from the live discriminators.

use guidegan_tensor::{Bind, Graph, Tensor};

use crate::config::{EvalConfig, KidMode};
use crate::data::{Dataset, Domain};
use crate::error::Result;
use crate::guidance::sources;
use crate::metrics::{embed_images, kid_score, Extractor, KidReport};
use crate::networks::GuidedCycleGan;

/// Translate one image from `from` to the other domain.
pub fn translate(model: &GuidedCycleGan<f32>, cfg_source: crate::config::GuidanceSource, from: Domain, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let gen = model.generator(from);
    let mut g = Graph::<f32>::new();
    let pg = g.bind(&gen.params, Bind::Constant);
    let xv = g.constant(x.clone());
    let mut srcs = Vec::new();
    if gen.is_guided() {
        for (dom, _) in sources(cfg_source, from) {
            let d = model.discriminator(dom);
            let pd = g.bind(&d.params, Bind::Constant);
            srcs.push(d.guidance(&mut g, &pd, xv)?);
        }
    }
    let y = gen.forward(&mut g, &pg, xv, &srcs)?;
    Ok(g.value(y).clone())
}

pub fn translate_all(
    model: &GuidedCycleGan<f32>,
    source: crate::config::GuidanceSource,
    from: Domain,
    xs: &[Tensor<f32>],
) -> Result<Vec<Tensor<f32>>> {
    xs.iter().map(|x| translate(model, source, from, x)).collect()
}

pub fn direction_label(from: Domain) -> String {
    format!("{}->{}", from, from.other())
}

/// KID of translated test images for both directions in each requested mode.
pub fn evaluate(
    model: &GuidedCycleGan<f32>,
    source: crate::config::GuidanceSource,
    data: &Dataset,
    modes: &[KidMode],
    eval: &EvalConfig,
    extractor: &dyn Extractor,
) -> Result<Vec<KidReport>> {
    let p = data.preprocess;
    let mut reports = Vec::new();
    for from in [Domain::A, Domain::B] {
        let src: Vec<Tensor<f32>> = data.test(from)?.eval_records(p).into_iter().map(|r| r.pixels).collect();
        let tgt: Vec<Tensor<f32>> = data.test(from.other())?.eval_records(p).into_iter().map(|r| r.pixels).collect();
        let fakes = translate_all(model, source, from, &src)?;
        let e_fake = embed_images(&fakes, extractor)?;
        let e_tgt = embed_images(&tgt, extractor)?;
        let e_src = embed_images(&src, extractor)?;
        for &mode in modes {
            let reals = match mode {
                KidMode::TargetOnly => e_tgt.len(),
                KidMode::BothDomains => e_tgt.len() + e_src.len(),
            };
            let size = eval.subset_size.min(e_fake.len()).min(reals);
            reports.push(kid_score(
                &direction_label(from),
                &e_fake,
                &e_tgt,
                Some(&e_src),
                mode,
                size,
                eval.num_subsets,
                eval.seed,
            )?);
        }
    }
    Ok(reports)
}
