use std::error::Error as StdError;
use std::path::{Path, PathBuf};

use lrpkit::eval::{
    continuity_estimate, pixel_flip, random_heatmap, sign_test, FlipConfig, FlipCurve, Granularity,
};
use lrpkit::explain::{filter_relevance, lrp, InputDomain};
use lrpkit::fixtures::{self, BiasMode};
use lrpkit::heatmaptools::{
    pattern, render_heatmap, sliding_window_explain, translation_average, Colormap, Normalization,
    TranslationSet,
};
use lrpkit::io::{self, ModelFile};
use lrpkit::prototype::{activation_maximize, AmObjective, AmOptions, Regularizer};
use lrpkit::train::{accuracy, train_sgd, SgdConfig};
use lrpkit::{Explainer, Heatmap, Method, MethodTag, Network, RuleConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{
    Arch, Cli, ColormapArg, Command, DataArgs, DomainArg, EvaluateArgs, ExplainArgs, MethodArg,
    MethodArgs, PrototypeArgs, RegularizerArg, RenderArgs, RuleArg, TrainArgs,
};

type CliResult<T = ()> = Result<T, Box<dyn StdError>>;

fn fmt(v: f64) -> String {
    io::format_float(v)
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Train(a) => train(a, cli.seed),
        Command::Explain(a) => explain(a),
        Command::Prototype(a) => prototype(a, cli.seed),
        Command::Evaluate(a) => evaluate(a, cli.seed),
        Command::Render(a) => render(a),
    }
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write(path: &Path, bytes: &[u8]) -> CliResult {
    io::write_file(path, bytes)?;
    Ok(())
}

/// Samples as `(image, label)`; IDX images keep a leading channel axis.
fn load_data(args: &DataArgs, seed: u64) -> CliResult<Vec<(Tensor, usize)>> {
    let all = if let (Some(images), Some(labels)) = (&args.images, &args.labels) {
        let images = io::unbatch_images(&io::load_images(images)?);
        let labels = io::load_labels(labels)?;
        if images.len() != labels.len() {
            return Err(format!("{} images but {} labels", images.len(), labels.len()).into());
        }
        images
            .into_iter()
            .zip(labels.iter().map(|&l| usize::from(l)))
            .collect()
    } else if let Some(n) = args.blobs {
        fixtures::two_blobs(&mut ChaCha8Rng::seed_from_u64(seed), n)
    } else {
        return Err("no data: pass --images/--labels or --blobs".into());
    };
    let data: Vec<_> = all
        .into_iter()
        .skip(args.skip)
        .take(args.count.unwrap_or(usize::MAX))
        .collect();
    if data.is_empty() {
        return Err("the selected sample range is empty".into());
    }
    Ok(data)
}

/// Reshapes every sample to the network's input shape.
fn fit_to(net: &Network, data: Vec<(Tensor, usize)>) -> CliResult<Vec<(Tensor, usize)>> {
    data.into_iter()
        .map(|(x, y)| Ok((x.reshape(net.input_shape())?, y)))
        .collect()
}

fn train(a: &TrainArgs, seed: u64) -> CliResult {
    let data = load_data(&a.data, seed)?;
    let classes = data.iter().map(|(_, y)| y + 1).max().unwrap_or(1).max(2);
    let shape = data[0].0.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = match a.arch {
        Arch::Mlp => {
            let d = shape.iter().product();
            fixtures::random_mlp(&mut rng, &[d, a.width, classes], BiasMode::Zero)
        }
        Arch::Conv => {
            let [c, h, w] = shape[..] else {
                return Err("the conv architecture needs image data".into());
            };
            if h < 6 || w < 6 {
                return Err(format!("images of {h}×{w} are too small for 5×5 filters").into());
            }
            fixtures::random_conv_net(
                &mut rng,
                [c, h, w],
                a.width,
                5,
                fixtures::sum_pool2(),
                classes,
                BiasMode::Zero,
            )
        }
    };
    let data = fit_to(&init, data)?;
    let cfg = SgdConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        seed,
        nonpositive_bias: a.nonpositive_bias,
    };
    let net = train_sgd(&init, &data, &cfg)?;
    let acc = accuracy(&net, &data)?;
    let mut model = ModelFile::new(net);
    if let Some(b) = &a.input_bounds {
        let shape = model.network.input_shape().to_vec();
        model.input_bounds = Some((Tensor::full(&shape, b[0]), Tensor::full(&shape, b[1])));
    }
    io::save_model(&model, &a.out)?;
    println!("samples: {}", data.len());
    println!("training accuracy: {acc:.6}");
    Ok(())
}

fn input_domain(args: &MethodArgs, model: &ModelFile) -> InputDomain {
    match args.domain {
        DomainArg::Auto => match &model.input_bounds {
            Some((low, high)) => InputDomain::Bounded {
                low: low.clone(),
                high: high.clone(),
            },
            None => InputDomain::NonNegative,
        },
        DomainArg::Nonnegative => InputDomain::NonNegative,
        DomainArg::Bounded => InputDomain::pixels(&model.network, args.low, args.high),
        DomainArg::Real => InputDomain::Real,
    }
}

fn build_method(args: &MethodArgs, model: &ModelFile) -> Method {
    let net = &model.network;
    match args.method {
        MethodArg::Sensitivity => Method::Sensitivity,
        MethodArg::Taylor => Method::SimpleTaylor,
        MethodArg::Lrp => Method::Lrp(match args.rule {
            RuleArg::Deeptaylor => RuleConfig::deep_taylor(net, input_domain(args, model)),
            RuleArg::Alpha1beta0 => RuleConfig::alpha_beta(net, 1.0, 0.0),
            RuleArg::Alpha2beta1 => RuleConfig::alpha_beta(net, 2.0, 1.0),
            RuleArg::Epsilon => RuleConfig::epsilon(net, args.epsilon),
        }),
    }
}

fn method_name(m: &MethodArgs) -> &'static str {
    match (m.method, m.rule) {
        (MethodArg::Sensitivity, _) => "sensitivity",
        (MethodArg::Taylor, _) => "taylor",
        (MethodArg::Lrp, RuleArg::Deeptaylor) => "lrp-deeptaylor",
        (MethodArg::Lrp, RuleArg::Alpha1beta0) => "lrp-alpha1beta0",
        (MethodArg::Lrp, RuleArg::Alpha2beta1) => "lrp-alpha2beta1",
        (MethodArg::Lrp, RuleArg::Epsilon) => "lrp-epsilon",
    }
}

fn is_idx(path: &Path) -> bool {
    std::fs::read(path)
        .map(|b| b.len() >= 4 && b[..4] == io::IDX_IMAGES_MAGIC.to_be_bytes())
        .unwrap_or(false)
}

/// Reads an explanation input. `exact` requires the network input shape;
/// otherwise only the channel count must agree (sliding windows).
fn load_input(path: &Path, index: usize, net: &Network, exact: bool) -> CliResult<Tensor> {
    let raw = if is_idx(path) {
        let batch = io::unbatch_images(&io::load_images(path)?);
        let n = batch.len();
        batch
            .into_iter()
            .nth(index)
            .ok_or_else(|| format!("index {index} outside the {n} images in {}", path.display()))?
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let t = io::tensor_from_csv(&text, None)?;
        let shape = net.input_shape();
        match (t.shape(), shape.len()) {
            (&[rows, cols], 3) if rows % shape[0] == 0 => {
                t.reshape(&[shape[0], rows / shape[0], cols])?
            }
            _ => t,
        }
    };
    if exact || raw.len() == net.input_shape().iter().product::<usize>() {
        Ok(raw.reshape(net.input_shape())?)
    } else {
        Ok(raw)
    }
}

fn parse_filter(spec: &str) -> CliResult<(usize, usize)> {
    let (a, b) = spec
        .split_once(':')
        .ok_or_else(|| format!("--filter expects LAYER:INDEX, got {spec:?}"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn explain(a: &ExplainArgs) -> CliResult {
    let model = io::load_model(&a.model)?;
    let net = &model.network;
    let method = build_method(&a.method, &model);
    let sliding = a.sliding_window.is_some();
    let x = load_input(&a.input, a.index, net, !sliding)?;
    let class = match (a.class, sliding) {
        (Some(c), _) => c,
        (None, false) => net.predict(&x)?,
        (None, true) => return Err("--sliding-window needs an explicit --class".into()),
    };

    let heatmap = if let Some(spec) = &a.filter {
        let Method::Lrp(cfg) = &method else {
            return Err("--filter needs --method lrp".into());
        };
        let (position, unit) = parse_filter(spec)?;
        let trace = net.forward(&x)?;
        let run = lrp(net, &trace, class, cfg)?;
        if position >= run.relevances().len() {
            return Err(format!(
                "filter position {position} outside 0..{}",
                run.relevances().len()
            )
            .into());
        }
        let mut mask = Tensor::zeros(run.relevance(position).shape());
        *mask
            .data_mut()
            .get_mut(unit)
            .ok_or_else(|| format!("unit {unit} outside layer position {position}"))? = 1.0;
        filter_relevance(net, &trace, &run, position, &mask, cfg)?
    } else if let Some(stride) = a.sliding_window {
        sliding_window_explain(&method, net, &x, stride, class)?
    } else if let Some(k) = a.translate {
        translation_average(&method, net, &x, class, &TranslationSet::around(k))?
    } else {
        method.explain(net, &x, class)?
    };

    write(
        &with_ext(&a.out, "csv"),
        io::tensor_to_csv(heatmap.scores()).as_bytes(),
    )?;
    write(
        &with_ext(&a.out, "ppm"),
        &render_heatmap(&heatmap, Colormap::DivergingRedBlue),
    )?;
    if a.pattern {
        let p = pattern(
            &x,
            &heatmap,
            Normalization::ClipPercentile(a.pattern_percentile),
        )?;
        write(
            &with_ext(&a.out, "pattern.csv"),
            io::tensor_to_csv(&p.image).as_bytes(),
        )?;
        let view = Heatmap::new(p.image, 0.0, MethodTag::Custom("pattern".into()));
        write(
            &with_ext(&a.out, "pattern.ppm"),
            &render_heatmap(&view, Colormap::SequentialRed),
        )?;
        if p.degenerate {
            println!("pattern: no positive relevance, pattern is zero");
        }
    }
    println!("method: {}", method_name(&a.method));
    println!("class: {class}");
    println!("explained value: {}", fmt(heatmap.explained_value()));
    println!("relevance total: {}", fmt(heatmap.total()));
    println!("residual: {}", fmt(heatmap.residual()));
    Ok(())
}

fn read_csv_as(path: &Path, net: &Network) -> CliResult<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(io::tensor_from_csv(&text, Some(net.input_shape()))?)
}

fn prototype(a: &PrototypeArgs, seed: u64) -> CliResult {
    let model = io::load_model(&a.model)?;
    let net = &model.network;
    let regularizer = match a.regularizer {
        RegularizerArg::None => Regularizer::None,
        RegularizerArg::L2 => Regularizer::L2 { lambda: a.lambda },
        RegularizerArg::L2mean => Regularizer::L2Mean {
            lambda: a.lambda,
            mean: read_csv_as(
                a.mean
                    .as_deref()
                    .ok_or("--regularizer l2mean needs --mean")?,
                net,
            )?,
        },
        RegularizerArg::Expert => {
            let source = match &a.expert {
                Some(p) => io::load_model(p)?,
                None => model.clone(),
            };
            Regularizer::Expert(source.expert.ok_or("the model file carries no expert")?)
        }
    };
    let mut objective = AmObjective::new(a.class, regularizer);
    if let (Some(eta), Some(anchor)) = (a.eta, &a.anchor) {
        objective = objective.localized(eta, read_csv_as(anchor, net)?);
    }
    let opts = AmOptions {
        step_size: a.step_size,
        max_iterations: a.steps,
        init: a.init.as_deref().map(|p| read_csv_as(p, net)).transpose()?,
        jitter: a.jitter,
        seed,
        clip: a.clip.as_ref().map(|c| (c[0], c[1])),
        ..Default::default()
    };
    let res = activation_maximize(net, &objective, &opts)?;
    write(
        &with_ext(&a.out, "csv"),
        io::tensor_to_csv(&res.prototype).as_bytes(),
    )?;
    let view = Heatmap::new(
        res.prototype.clone(),
        0.0,
        MethodTag::Custom("prototype".into()),
    );
    write(
        &with_ext(&a.out, "ppm"),
        &render_heatmap(&view, Colormap::DivergingRedBlue),
    )?;
    let mut traj = String::from("step,value\n");
    for (i, v) in res.trajectory.iter().enumerate() {
        traj.push_str(&format!("{i},{}\n", fmt(*v)));
    }
    write(&with_ext(&a.out, "trajectory.csv"), traj.as_bytes())?;
    println!("class: {}", a.class);
    println!("class probability: {}", fmt(res.class_probability));
    println!("objective: {}", fmt(*res.trajectory.last().unwrap()));
    println!("iterations: {}", res.iterations);
    println!("converged: {}", res.converged);
    Ok(())
}

fn mean_curve(curves: &[FlipCurve]) -> FlipCurve {
    let len = curves[0].values.len();
    let n = curves.len() as f64;
    let values: Vec<f64> = (0..len)
        .map(|i| curves.iter().map(|c| c.values[i]).sum::<f64>() / n)
        .collect();
    FlipCurve {
        auc: lrpkit::eval::auc(&values),
        values,
        order: Vec::new(),
    }
}

fn evaluate(a: &EvaluateArgs, seed: u64) -> CliResult {
    if !a.pixel_flip && !a.continuity {
        return Err("nothing to do: pass --pixel-flip and/or --continuity".into());
    }
    let model = io::load_model(&a.model)?;
    let net = &model.network;
    let data = fit_to(net, load_data(&a.data, seed)?)?;
    let method = build_method(&a.method, &model);
    let name = method_name(&a.method);
    println!("samples: {}", data.len());

    if a.pixel_flip {
        let cfg = FlipConfig {
            granularity: if a.patch <= 1 {
                Granularity::Feature
            } else {
                Granularity::Patch(a.patch)
            },
            fill: a.fill,
            max_steps: a.max_steps,
        };
        let mut ours = Vec::with_capacity(data.len());
        let mut baseline = Vec::with_capacity(data.len());
        let mut per_sample = String::from("sample,class,method_auc,random_auc\n");
        for (i, (x, _)) in data.iter().enumerate() {
            let class = net.predict(x)?;
            let h = method.explain(net, x, class)?;
            let c = pixel_flip(net, x, &h, class, &cfg)?;
            let rnd = random_heatmap(x.shape(), seed.wrapping_add(i as u64));
            let r = pixel_flip(net, x, &rnd, class, &cfg)?;
            per_sample.push_str(&format!("{i},{class},{},{}\n", fmt(c.auc), fmt(r.auc)));
            ours.push(c);
            baseline.push(r);
        }
        let wins = ours
            .iter()
            .zip(&baseline)
            .filter(|(c, r)| c.auc < r.auc)
            .count();
        let losses = ours
            .iter()
            .zip(&baseline)
            .filter(|(c, r)| c.auc > r.auc)
            .count();
        let m_ours = mean_curve(&ours);
        let m_rand = mean_curve(&baseline);
        write(
            &with_ext(&a.out, &format!("{name}.csv")),
            io::curve_to_csv(&m_ours).as_bytes(),
        )?;
        write(
            &with_ext(&a.out, "random.csv"),
            io::curve_to_csv(&m_rand).as_bytes(),
        )?;
        write(&with_ext(&a.out, "auc.csv"), per_sample.as_bytes())?;
        println!("pixel-flip {name} mean AUC: {}", fmt(m_ours.auc));
        println!("pixel-flip random mean AUC: {}", fmt(m_rand.auc));
        println!(
            "sign test {name} < random: {wins} wins, {losses} losses, p = {:e}",
            sign_test(wins, losses)
        );
    }

    if a.continuity {
        let mut ratios = Vec::with_capacity(data.len());
        for (i, (x, _)) in data.iter().enumerate() {
            let class = net.predict(x)?;
            let c = continuity_estimate(
                &method,
                net,
                class,
                std::slice::from_ref(x),
                a.delta,
                a.trials,
                seed.wrapping_add(i as u64),
            )?;
            ratios.push(c);
        }
        let mut csv = String::from("sample,ratio\n");
        for (i, r) in ratios.iter().enumerate() {
            csv.push_str(&format!("{i},{}\n", fmt(*r)));
        }
        write(&with_ext(&a.out, "continuity.csv"), csv.as_bytes())?;
        let max = ratios.iter().cloned().fold(0.0, f64::max);
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        println!("continuity {name} max ratio: {}", fmt(max));
        println!("continuity {name} mean ratio: {}", fmt(mean));
    }
    Ok(())
}

fn render(a: &RenderArgs) -> CliResult {
    let text =
        std::fs::read_to_string(&a.heatmap).map_err(|e| format!("{}: {e}", a.heatmap.display()))?;
    let t = io::tensor_from_csv(&text, None)?;
    let t = match *t.shape() {
        [rows, cols] if a.channels > 0 && rows % a.channels == 0 => {
            t.reshape(&[a.channels, rows / a.channels, cols])?
        }
        [_] => t,
        _ => return Err(format!("cannot split the CSV into {} channels", a.channels).into()),
    };
    let cmap = match a.colormap {
        ColormapArg::Diverging => Colormap::DivergingRedBlue,
        ColormapArg::Red => Colormap::SequentialRed,
    };
    let h = Heatmap::new(t, 0.0, MethodTag::Custom("csv".into()));
    write(&a.out, &render_heatmap(&h, cmap))?;
    Ok(())
}
