//! Command-line front end: inference, direct fitting, rendering, gradient
//! checks, image metrics, and synthetic scene generation.

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Matrix4;
use serde::Deserialize;
use sparsesplat::fit::fit_scene;
use sparsesplat::gaussians::GaussianSet;
use sparsesplat::metrics::{psnr, ssim};
use sparsesplat::pfm::write_pfm;
use sparsesplat::pipeline::{init_weights, run_infer, RunConfig};
use sparsesplat::ply::read_ply;
use sparsesplat::ply::write_ply;
use sparsesplat::scene::{load_scene, read_png, write_png};
use sparsesplat::synth::{generate, Preset};
use sparsesplat::weights::WeightStore;
use sparsesplat::CameraView;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sparsesplat", about = "Sparse-view Gaussian reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GradModule {
    Rasterizer,
    Numerics,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Plane,
    Box,
}

#[derive(Subcommand)]
enum Command {
    /// Run the feed-forward pipeline on a scene and render its target views.
    Infer {
        #[arg(long)]
        scene: PathBuf,
        /// Weight store; created (seed-initialized) if it does not exist.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed for weight initialization.
        #[arg(long)]
        seed: Option<u64>,
        /// JSON run configuration (defaults apply to omitted fields).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Optimize a random Gaussian set against the scene's views.
    Fit {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a Gaussian PLY from a camera description.
    Render {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference validation of analytic gradients.
    Gradcheck {
        /// Restrict to one module; default runs every check.
        #[arg(long)]
        module: Option<GradModule>,
    },
    /// PSNR and SSIM between two PNG images.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Generate a self-contained synthetic scene bundle.
    Synth {
        #[arg(long)]
        preset: PresetArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), Box<dyn std::error::Error>> {
    match command {
        Command::Infer {
            scene,
            weights,
            out,
            seed,
            config,
        } => cmd_infer(&scene, &weights, &out, seed, config.as_deref()),
        Command::Fit {
            scene,
            out,
            iters,
            lr,
            config,
        } => cmd_fit(&scene, &out, iters, lr, config.as_deref()),
        Command::Render { ply, camera, out } => cmd_render(&ply, &camera, &out),
        Command::Gradcheck { module } => cmd_gradcheck(module),
        Command::Metrics { a, b } => cmd_metrics(&a, &b),
        Command::Synth { preset, out, seed } => {
            let preset = match preset {
                PresetArg::Plane => Preset::Plane,
                PresetArg::Box => Preset::Box,
            };
            std::fs::create_dir_all(&out)?;
            let result = generate(preset, &out, seed)?;
            println!("wrote {}", result.scene_path.display());
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Box<dyn std::error::Error>> {
    let mut config: RunConfig = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_infer(
    scene_path: &Path,
    weights_path: &Path,
    out: &Path,
    seed: Option<u64>,
    config_path: Option<&Path>,
) -> Result<(), Box<dyn std::error::Error>> {
    let config = load_config(config_path, seed)?;
    let scene = load_scene(scene_path)?;
    let ws = if weights_path.exists() {
        WeightStore::load(weights_path)?
    } else {
        let ws = init_weights(&config);
        ws.save(weights_path)?;
        ws
    };
    let result = run_infer(&scene, &config, &ws)?;
    std::fs::create_dir_all(out)?;
    write_ply(&result.gaussians, out.join("gaussians.ply"))?;
    for (i, render) in result.renders.iter().enumerate() {
        write_png(&render.color, out.join(format!("render_{i}.png")))?;
    }
    for depth in &result.depths {
        write_pfm(out.join(format!("depth_{}.pfm", depth.view_index)), &depth.depth)?;
    }
    println!(
        "rendered {} target view(s), {} gaussians",
        result.renders.len(),
        result.gaussians.len()
    );
    Ok(())
}

fn cmd_fit(
    scene_path: &Path,
    out: &Path,
    iters: Option<usize>,
    lr: Option<f32>,
    config_path: Option<&Path>,
) -> Result<(), Box<dyn std::error::Error>> {
    let mut config = load_config(config_path, None)?;
    if let Some(n) = iters {
        config.fit.iterations = n;
    }
    if let Some(l) = lr {
        config.fit.learning_rate = l;
    }
    let scene = load_scene(scene_path)?;
    let result = fit_scene(&scene, &config, None)?;
    std::fs::create_dir_all(out)?;
    write_ply(&result.set, out.join("fitted.ply"))?;
    let trace = serde_json::json!({
        "loss_trace": result.loss_trace,
        "final_psnr": result.final_psnr,
    });
    std::fs::write(out.join("fit.json"), serde_json::to_string_pretty(&trace)?)?;
    println!(
        "fit {} gaussians in {} iterations, psnr {:.2} dB",
        result.set.len(),
        result.loss_trace.len(),
        result.final_psnr
    );
    Ok(())
}

#[derive(Deserialize)]
struct CameraJson {
    intrinsics: [f64; 4],
    world_from_camera: Vec<f64>,
    width: usize,
    height: usize,
    near: f64,
    far: f64,
}

fn cmd_render(ply: &Path, camera: &Path, out: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let set = read_ply(ply)?;
    let cam_json: CameraJson = serde_json::from_str(&std::fs::read_to_string(camera)?)?;
    if cam_json.world_from_camera.len() != 16 {
        return Err(format!(
            "camera file {}: world_from_camera needs 16 entries, got {}",
            camera.display(),
            cam_json.world_from_camera.len()
        )
        .into());
    }
    let cam = CameraView {
        fx: cam_json.intrinsics[0],
        fy: cam_json.intrinsics[1],
        cx: cam_json.intrinsics[2],
        cy: cam_json.intrinsics[3],
        world_from_camera: Matrix4::from_row_slice(&cam_json.world_from_camera),
        width: cam_json.width,
        height: cam_json.height,
        near: cam_json.near,
        far: cam_json.far,
    };
    cam.validate()?;
    let render = sparsesplat::rasterizer::rasterize(&set, &cam, cam.width, cam.height, [0.0; 3])?;
    write_png(&render.color, out)?;
    println!("rendered {} gaussians to {}", set.len(), out.display());
    Ok(())
}

fn cmd_metrics(a: &Path, b: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let img_a = read_png(a)?;
    let img_b = read_png(b)?;
    let p = psnr(&img_a, &img_b, 1.0)?;
    let s = ssim(&img_a, &img_b)?;
    println!("{{\"psnr\": {p:.6}, \"ssim\": {s:.6}}}");
    Ok(())
}

fn cmd_gradcheck(module: Option<GradModule>) -> Result<(), Box<dyn std::error::Error>> {
    let mut failed = false;
    let run_raster = !matches!(module, Some(GradModule::Numerics));
    let run_numerics = !matches!(module, Some(GradModule::Rasterizer));
    if run_numerics {
        failed |= !gradcheck::numerics();
    }
    if run_raster {
        failed |= !gradcheck::rasterizer();
    }
    if failed {
        Err("gradient check failed".into())
    } else {
        Ok(())
    }
}

mod gradcheck {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sparsesplat::nn::{
        conv2d, conv2d_backward, grad_check, linear, linear_backward, se_gate, se_gate_backward,
        Activation,
    };
    use sparsesplat::rasterizer::{rasterize_backward, rasterize_reference};
    use sparsesplat::sh::num_coeffs;
    use sparsesplat::Tensor;

    fn report(name: &str, pass: bool, detail: String) -> bool {
        let tag = if pass { "pass" } else { "FAIL" };
        println!("[{tag}] {name}: {detail}");
        pass
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect()
    }

    pub fn numerics() -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut all = true;

        // linear: d/dx, d/dW, d/db through a GELU head.
        {
            let (rows, cin, cout) = (3, 4, 5);
            let x0 = rand_vec(&mut rng, rows * cin);
            let w0 = rand_vec(&mut rng, cin * cout);
            let b0 = rand_vec(&mut rng, cout);
            let gout: Vec<f64> = rand_vec(&mut rng, rows * cout);
            let eval = |x: &[f64], w: &[f64], b: &[f64]| -> sparsesplat::Result<f64> {
                let xt = Tensor::new(vec![rows, cin], x.to_vec())?;
                let wt = Tensor::new(vec![cin, cout], w.to_vec())?;
                let bt = Tensor::new(vec![cout], b.to_vec())?;
                let y = linear(&xt, &wt, Some(&bt), Activation::Gelu)?;
                Ok(y.data().iter().zip(&gout).map(|(a, b)| a * b).sum())
            };
            let xt = Tensor::new(vec![rows, cin], x0.clone()).unwrap();
            let wt = Tensor::new(vec![cin, cout], w0.clone()).unwrap();
            let bt = Tensor::new(vec![cout], b0.clone()).unwrap();
            let gt = Tensor::new(vec![rows, cout], gout.clone()).unwrap();
            let (gx, gw, gb) =
                linear_backward(&xt, &wt, Some(&bt), Activation::Gelu, &gt).unwrap();
            let checks = [
                ("linear d/dx", grad_check(|x| eval(x, &w0, &b0), &x0, gx.data(), 1e-5, 1e-5)),
                ("linear d/dW", grad_check(|w| eval(&x0, w, &b0), &w0, gw.data(), 1e-5, 1e-5)),
                ("linear d/db", grad_check(|b| eval(&x0, &w0, b), &b0, gb.data(), 1e-5, 1e-5)),
            ];
            for (name, r) in checks {
                let r = r.unwrap();
                all &= report(name, r.pass, format!("max rel err {:.3e}", r.max_rel_err));
            }
        }

        // conv2d: d/dx, d/dk, d/db.
        {
            let (h, w, cin, cout, k) = (5, 4, 2, 3, 3);
            let x0 = rand_vec(&mut rng, h * w * cin);
            let k0 = rand_vec(&mut rng, k * k * cin * cout);
            let b0 = rand_vec(&mut rng, cout);
            let gout = rand_vec(&mut rng, h * w * cout);
            let eval = |x: &[f64], kk: &[f64], b: &[f64]| -> sparsesplat::Result<f64> {
                let xt = Tensor::new(vec![h, w, cin], x.to_vec())?;
                let kt = Tensor::new(vec![k, k, cin, cout], kk.to_vec())?;
                let bt = Tensor::new(vec![cout], b.to_vec())?;
                let y = conv2d(&xt, &kt, Some(&bt), 1, 1)?;
                Ok(y.data().iter().zip(&gout).map(|(a, b)| a * b).sum())
            };
            let xt = Tensor::new(vec![h, w, cin], x0.clone()).unwrap();
            let kt = Tensor::new(vec![k, k, cin, cout], k0.clone()).unwrap();
            let gt = Tensor::new(vec![h, w, cout], gout.clone()).unwrap();
            let (gx, gk, gb) = conv2d_backward(&xt, &kt, 1, 1, &gt).unwrap();
            let checks = [
                ("conv2d d/dx", grad_check(|x| eval(x, &k0, &b0), &x0, gx.data(), 1e-5, 1e-5)),
                ("conv2d d/dk", grad_check(|kk| eval(&x0, kk, &b0), &k0, gk.data(), 1e-5, 1e-5)),
                ("conv2d d/db", grad_check(|b| eval(&x0, &k0, b), &b0, gb.data(), 1e-5, 1e-5)),
            ];
            for (name, r) in checks {
                let r = r.unwrap();
                all &= report(name, r.pass, format!("max rel err {:.3e}", r.max_rel_err));
            }
        }

        // se_gate: d/dfeature and d/dcontext.
        {
            let (rows, c, ctx, hidden) = (6, 4, 3, 5);
            let f0 = rand_vec(&mut rng, rows * c);
            let c0 = rand_vec(&mut rng, ctx);
            let w1 = Tensor::new(vec![ctx, hidden], rand_vec(&mut rng, ctx * hidden)).unwrap();
            let b1 = Tensor::new(vec![hidden], rand_vec(&mut rng, hidden)).unwrap();
            let w2 = Tensor::new(vec![hidden, c], rand_vec(&mut rng, hidden * c)).unwrap();
            let b2 = Tensor::new(vec![c], rand_vec(&mut rng, c)).unwrap();
            let gout = rand_vec(&mut rng, rows * c);
            let eval = |f: &[f64], cx: &[f64]| -> sparsesplat::Result<f64> {
                let ft = Tensor::new(vec![rows, c], f.to_vec())?;
                let ct = Tensor::new(vec![ctx], cx.to_vec())?;
                let y = se_gate(&ft, &ct, &w1, &b1, &w2, &b2)?;
                Ok(y.data().iter().zip(&gout).map(|(a, b)| a * b).sum())
            };
            let ft = Tensor::new(vec![rows, c], f0.clone()).unwrap();
            let ct = Tensor::new(vec![ctx], c0.clone()).unwrap();
            let gt = Tensor::new(vec![rows, c], gout.clone()).unwrap();
            let (gf, gc) = se_gate_backward(&ft, &ct, &w1, &b1, &w2, &b2, &gt).unwrap();
            let checks = [
                ("se_gate d/dfeature", grad_check(|f| eval(f, &c0), &f0, gf.data(), 1e-5, 1e-5)),
                ("se_gate d/dcontext", grad_check(|cx| eval(&f0, cx), &c0, gc.data(), 1e-5, 1e-5)),
            ];
            for (name, r) in checks {
                let r = r.unwrap();
                all &= report(name, r.pass, format!("max rel err {:.3e}", r.max_rel_err));
            }
        }
        all
    }

    fn pack(set: &GaussianSet<f64>) -> Vec<f64> {
        let mut v = Vec::new();
        for g in &set.gaussians {
            v.extend_from_slice(&g.center);
            v.push(g.opacity);
            v.extend_from_slice(&g.scale);
            v.extend_from_slice(&g.rotation);
            for c in &g.sh {
                v.extend_from_slice(c);
            }
        }
        v
    }

    fn unpack(template: &GaussianSet<f64>, v: &[f64]) -> GaussianSet<f64> {
        let mut set = template.clone();
        let mut it = v.iter().copied();
        let mut next = || it.next().unwrap();
        for g in &mut set.gaussians {
            for c in &mut g.center {
                *c = next();
            }
            g.opacity = next();
            for s in &mut g.scale {
                *s = next();
            }
            for q in &mut g.rotation {
                *q = next();
            }
            for c in &mut g.sh {
                for ch in c {
                    *ch = next();
                }
            }
        }
        set
    }

    fn grad_vec(g: &sparsesplat::rasterizer::Gradients<f64>) -> Vec<f64> {
        let mut v = Vec::new();
        for i in 0..g.opacity.len() {
            v.extend_from_slice(&g.center[i]);
            v.push(g.opacity[i]);
            v.extend_from_slice(&g.scale[i]);
            v.extend_from_slice(&g.rotation[i]);
            for c in &g.sh[i] {
                v.extend_from_slice(c);
            }
        }
        v
    }

    pub fn rasterizer() -> bool {
        let (w, h) = (24usize, 24usize);
        let cam = CameraView {
            fx: 24.0,
            fy: 24.0,
            cx: 12.0,
            cy: 12.0,
            world_from_camera: Matrix4::identity(),
            width: w,
            height: h,
            near: 0.5,
            far: 20.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sh_degree = 1;
        let nsh = num_coeffs(sh_degree);
        let gaussians = (0..5)
            .map(|_| sparsesplat::Gaussian {
                center: [
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(2.0..4.0),
                ],
                opacity: rng.gen_range(0.3..0.9),
                scale: [
                    rng.gen_range(0.1..0.3),
                    rng.gen_range(0.1..0.3),
                    rng.gen_range(0.1..0.3),
                ],
                rotation: {
                    let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    q.map(|v| v / n)
                },
                sh: (0..nsh)
                    .map(|_| std::array::from_fn(|_| rng.gen_range(-0.4..0.4)))
                    .collect(),
            })
            .collect();
        let set = GaussianSet {
            gaussians,
            sh_degree,
        };
        let bg = [0.1f64, 0.2, 0.3];
        let weights: Vec<f64> = (0..w * h * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d_color = Tensor::new(vec![h, w, 3], weights.clone()).unwrap();
        let analytic = grad_vec(
            &rasterize_backward(&set, &cam, w, h, bg, &d_color).unwrap(),
        );
        let x0 = pack(&set);
        let eval = |x: &[f64]| {
            let out = rasterize_reference(&unpack(&set, x), &cam, w, h, bg).unwrap();
            let loss: f64 = out.color.data().iter().zip(&weights).map(|(c, g)| c * g).sum();
            (loss, out.contributors)
        };
        let eps = 1e-6;
        let mut max_rel = 0.0f64;
        let mut checked = 0usize;
        let mut probe = x0.clone();
        for i in 0..x0.len() {
            probe[i] = x0[i] + eps;
            let (fp, cp) = eval(&probe);
            probe[i] = x0[i] - eps;
            let (fm, cm) = eval(&probe);
            probe[i] = x0[i];
            if cp != cm {
                continue; // a threshold gate flipped; FD is invalid here
            }
            let fd = (fp - fm) / (2.0 * eps);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
        let pass = max_rel <= 1e-3 && checked > x0.len() / 2;
        report(
            "rasterizer full backward",
            pass,
            format!("max rel err {max_rel:.3e} over {checked}/{} coords", x0.len()),
        )
    }
}
