use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use fbfq_core::codec::{rmse, QuantRow, Variant, QK_K};
use fbfq_core::driver::{assemble, plan_tiles, AccelCaps, Driver, LayerDims};
use fbfq_core::gguf::GgufFile;
use fbfq_core::isa::InstructionStream;
use fbfq_core::kernels::{
    dequant_matmul_oracle, matmul_bfq_quantized, q2k_ones, q3k_ones, q8k_ones, quantize_input,
    MatrixF32, QuantMatrix, QuantizedInput,
};
use fbfq_core::sim::{estimate_cycles, SimConfig, Simulator};
use fbfq_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde_json::json;

use crate::fbft::{input_to_tensor, tensor_to_input, Tensor, MAGIC};
use crate::report::{self, rows_of, ErrorStats, RunReport, PRINT_LIMIT};
use crate::{Command, Engine, Format, MatmulArgs, Pattern, SimArgs, VariantArg};

pub fn run(cmd: Command) -> Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cmd {
        Command::Quantize {
            input,
            variant,
            columns,
            out: path,
            fmt,
        } => quantize(&input, variant.into(), columns, &path, fmt.format, &mut out),
        Command::Dequantize { input, out: path } => dequantize(&input, &path, &mut out),
        Command::Matmul(args) => matmul(args, &mut out),
        Command::Inspect { file, fmt } => inspect(&file, fmt.format, &mut out),
        Command::Bench {
            dims,
            variant,
            caps,
            lanes,
            clock_mhz,
            format,
        } => bench(
            &dims,
            variant.into(),
            caps,
            &lanes,
            clock_mhz,
            format,
            &mut out,
        ),
        Command::Replay {
            program,
            dims,
            sim,
            fmt,
        } => replay(&program, dims, &sim, fmt.format, &mut out),
        Command::Gen {
            rows,
            cols,
            seed,
            pattern,
            variant,
            out: path,
        } => gen(rows, cols, seed, pattern, variant.map(Into::into), &path),
    }
}

fn sim_config(args: &SimArgs) -> Result<SimConfig> {
    let config = SimConfig {
        caps: args.caps,
        lanes: args.lanes,
        clock_mhz: args.clock_mhz,
        ..SimConfig::default()
    };
    config.validate()?;
    Ok(config)
}

/// An FBFT file, or raw little-endian fp32 read as a single row.
fn read_f32_source(path: &Path) -> Result<MatrixF32> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(&MAGIC) {
        return match Tensor::from_bytes(&bytes)? {
            Tensor::F32(m) => Ok(m),
            Tensor::Quant(q) => Err(Error::InvalidInput(format!(
                "{} already holds {} data",
                path.display(),
                q.variant()
            ))),
        };
    }
    if bytes.len() % 4 != 0 {
        return Err(Error::Shape(format!(
            "{} is {} bytes, not a whole number of fp32 values",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MatrixF32::new(1, data.len(), data)
}

fn quantize(
    input: &Path,
    variant: Variant,
    columns: bool,
    path: &Path,
    format: Format,
    out: &mut impl Write,
) -> Result<()> {
    let x = read_f32_source(input)?;
    let (tensor, decoded) = if columns {
        if variant != Variant::Q8K {
            return Err(Error::InvalidInput(
                "--columns writes MatMul inputs, which are Q8_K".into(),
            ));
        }
        let xq = quantize_input(&x)?;
        (input_to_tensor(&xq)?, xq.dequantize())
    } else {
        let q = QuantMatrix::quantize(&x, variant)?;
        let d = q.dequantize();
        (Tensor::Quant(q), d)
    };
    tensor.write(path)?;
    let err = rmse(decoded.data(), x.data());
    let (rows, cols) = tensor.shape();
    let superblocks = rows * cols / QK_K;
    match format {
        Format::Text => {
            writeln!(out, "variant={variant}")?;
            writeln!(out, "rows={rows}")?;
            writeln!(out, "cols={cols}")?;
            writeln!(out, "superblocks={superblocks}")?;
            writeln!(out, "bytes={}", superblocks * variant.sb_bytes())?;
            writeln!(out, "rmse={err:e}")?;
        }
        Format::Csv => {
            writeln!(out, "variant,rows,cols,superblocks,bytes,rmse")?;
            writeln!(
                out,
                "{variant},{rows},{cols},{superblocks},{},{err:e}",
                superblocks * variant.sb_bytes()
            )?;
        }
        Format::Json => report::json(
            out,
            &json!({
                "variant": variant.to_string(),
                "rows": rows,
                "cols": cols,
                "superblocks": superblocks,
                "bytes": superblocks * variant.sb_bytes(),
                "rmse": err,
            }),
        )?,
    }
    Ok(())
}

fn dequantize(input: &Path, path: &Path, out: &mut impl Write) -> Result<()> {
    let Tensor::Quant(q) = Tensor::read(input)? else {
        return Err(Error::InvalidInput(format!(
            "{} is not quantized",
            input.display()
        )));
    };
    let m = q.dequantize();
    Tensor::F32(m).write(path)?;
    writeln!(out, "rows={}\ncols={}", q.rows(), q.row_len())?;
    Ok(())
}

fn load_weights(path: &Path, variant: Option<VariantArg>) -> Result<QuantMatrix> {
    let wanted = variant.map(Variant::from);
    if wanted == Some(Variant::Q8K) {
        return Err(Error::InvalidInput("weights must be q2k or q3k".into()));
    }
    match Tensor::read(path)? {
        Tensor::F32(m) => {
            let v = wanted.ok_or_else(|| {
                Error::InvalidInput("fp32 weights need --variant q2k or q3k".into())
            })?;
            QuantMatrix::quantize(&m, v)
        }
        Tensor::Quant(q) => {
            if q.variant() == Variant::Q8K {
                return Err(Error::InvalidInput(
                    "weights must be Q2_K or Q3_K, file holds Q8_K".into(),
                ));
            }
            if let Some(v) = wanted.filter(|v| *v != q.variant()) {
                return Err(Error::InvalidInput(format!(
                    "--variant {v} but the weight file holds {}",
                    q.variant()
                )));
            }
            Ok(q)
        }
    }
}

fn load_input(path: &Path) -> Result<QuantizedInput> {
    match Tensor::read(path)? {
        Tensor::F32(x) => quantize_input(&x),
        Tensor::Quant(q) => tensor_to_input(&q),
    }
}

fn matmul(args: MatmulArgs, out: &mut impl Write) -> Result<()> {
    let w = load_weights(&args.weights, args.variant)?;
    let xq = load_input(&args.input)?;
    if w.row_len() != xq.k() {
        return Err(Error::Shape(format!(
            "weights are {}x{}, input depth is {}",
            w.rows(),
            w.row_len(),
            xq.k()
        )));
    }
    let dims = LayerDims::new(w.rows(), w.row_len(), xq.cols())?;
    let start = Instant::now();
    let mut cycles = None;
    let mut estimated_ms = None;
    let y = match args.engine {
        Engine::Ref => dequant_matmul_oracle(&w, &xq)?,
        Engine::Fused => matmul_bfq_quantized(&w, &xq)?,
        Engine::Sim => {
            let config = sim_config(&args.sim)?;
            let mut driver = Driver::new(Simulator::new(config)?);
            let y = driver.run_matmul_quantized(&w, &xq)?;
            let stats = driver.sim().cycle_report();
            estimated_ms = Some(stats.seconds(config.clock_mhz) * 1e3);
            cycles = Some(stats);
            if let (Some(path), Some(program)) = (&args.dump_program, driver.last_program()) {
                program.write_fbfq(path)?;
            }
            y
        }
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    if args.dump_program.is_some() && args.engine != Engine::Sim {
        return Err(Error::InvalidInput(
            "--dump-program needs --engine sim".into(),
        ));
    }
    let errors = if args.compare {
        Some(ErrorStats::between(&y, &dequant_matmul_oracle(&w, &xq)?))
    } else {
        None
    };
    if let Some(path) = &args.out {
        Tensor::F32(y.clone()).write(path)?;
    }
    let report = RunReport {
        engine: args.engine,
        dims,
        weights: w.variant().to_string(),
        wall_ms,
        errors,
        cycles,
        estimated_ms,
        output: (y.data().len() <= PRINT_LIMIT).then(|| rows_of(&y)),
    };
    match args.fmt.format {
        Format::Text => report.text(out),
        Format::Csv => report.csv(out),
        Format::Json => report::json(out, &report),
    }
}

fn inspect(path: &Path, format: Format, out: &mut impl Write) -> Result<()> {
    let f = GgufFile::open(path)?;
    let hist = f.type_histogram();
    let matmul = f.matmul_weight_counts();
    let dims_of = |d: &[u64]| d.iter().map(u64::to_string).collect::<Vec<_>>().join("x");
    match format {
        Format::Text => {
            writeln!(out, "version={}", f.version)?;
            writeln!(out, "tensors={}", f.tensors.len())?;
            writeln!(out, "alignment={}", f.alignment)?;
            writeln!(
                out,
                "{:<48} {:<6} {:<20} {:>12} {:>12}",
                "name", "type", "dims", "elements", "offset"
            )?;
            for t in &f.tensors {
                writeln!(
                    out,
                    "{:<48} {:<6} {:<20} {:>12} {:>12}",
                    t.name,
                    t.type_name(),
                    dims_of(&t.dims),
                    t.elements(),
                    t.offset
                )?;
            }
            writeln!(out)?;
            writeln!(
                out,
                "{:<6} {:>8} {:>14} {:>8}",
                "type", "tensors", "elements", "percent"
            )?;
            for h in &hist.types {
                writeln!(
                    out,
                    "{:<6} {:>8} {:>14} {:>8.2}",
                    h.name, h.tensors, h.elements, h.percent
                )?;
            }
            for (id, count) in &matmul {
                writeln!(
                    out,
                    "matmul_weights_{}={count}",
                    fbfq_core::gguf::type_name(*id)
                )?;
            }
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let record = |w: &mut csv::Writer<_>, r: [String; 8]| {
                w.write_record(&r).map_err(io::Error::from)
            };
            record(
                &mut w,
                [
                    "section", "name", "type", "dims", "elements", "offset", "tensors", "percent",
                ]
                .map(String::from),
            )?;
            for t in &f.tensors {
                record(
                    &mut w,
                    [
                        "tensor".into(),
                        t.name.clone(),
                        t.type_name(),
                        dims_of(&t.dims),
                        t.elements().to_string(),
                        t.offset.to_string(),
                        String::new(),
                        String::new(),
                    ],
                )?;
            }
            for h in &hist.types {
                record(
                    &mut w,
                    [
                        "type".into(),
                        String::new(),
                        h.name.clone(),
                        String::new(),
                        h.elements.to_string(),
                        String::new(),
                        h.tensors.to_string(),
                        format!("{:.4}", h.percent),
                    ],
                )?;
            }
            w.flush()?;
        }
        Format::Json => {
            let matmul: serde_json::Map<_, _> = matmul
                .iter()
                .map(|(id, n)| (fbfq_core::gguf::type_name(*id), json!(n)))
                .collect();
            report::json(
                out,
                &json!({
                    "version": f.version,
                    "alignment": f.alignment,
                    "tensors": f.tensors,
                    "histogram": hist,
                    "matmul_weights": matmul,
                }),
            )?
        }
    }
    Ok(())
}

fn bench(
    dims: &[LayerDims],
    variant: Variant,
    caps: AccelCaps,
    lanes: &[usize],
    clock_mhz: f64,
    format: Format,
    out: &mut impl Write,
) -> Result<()> {
    if variant == Variant::Q8K {
        return Err(Error::InvalidInput(
            "bench weights must be q2k or q3k".into(),
        ));
    }
    let mut rows = Vec::new();
    for d in dims {
        let plan = plan_tiles(*d, caps)?;
        for &l in lanes {
            let config = SimConfig {
                caps,
                lanes: l,
                clock_mhz,
                ..SimConfig::default()
            };
            config.validate()?;
            let stats = estimate_cycles(&plan, *d, variant, &config)?;
            rows.push((*d, l, plan.tiles.len(), plan.fast_path, stats));
        }
    }
    match format {
        Format::Json => {
            let items: Vec<_> = rows
                .iter()
                .map(|(d, l, tiles, fast, s)| {
                    json!({
                        "model": "estimate",
                        "m": d.m, "k": d.k, "n": d.n,
                        "variant": variant.to_string(),
                        "caps": caps.to_string(),
                        "lanes": l,
                        "tiles": tiles,
                        "fast_path": fast,
                        "cycles": s,
                        "cycles_compute": s.cycles_compute(),
                        "cycles_total": s.cycles_total(),
                        "ms": s.seconds(clock_mhz) * 1e3,
                    })
                })
                .collect();
            report::json(out, &items)
        }
        // text and CSV share the table
        _ => {
            let mut w = csv::Writer::from_writer(out);
            let mut header: Vec<String> = [
                "model",
                "m",
                "k",
                "n",
                "variant",
                "caps",
                "lanes",
                "tiles",
                "fast_path",
            ]
            .map(String::from)
            .to_vec();
            header.extend(
                fbfq_core::sim::CycleStats::default()
                    .fields()
                    .iter()
                    .map(|f| f.0.to_string()),
            );
            header.push("ms".into());
            w.write_record(&header).map_err(io::Error::from)?;
            for (d, l, tiles, fast, s) in &rows {
                let mut r = vec![
                    "estimate".to_string(),
                    d.m.to_string(),
                    d.k.to_string(),
                    d.n.to_string(),
                    variant.to_string(),
                    caps.to_string(),
                    l.to_string(),
                    tiles.to_string(),
                    fast.to_string(),
                ];
                r.extend(s.fields().iter().map(|f| f.1.to_string()));
                r.push(format!("{:.6}", s.seconds(clock_mhz) * 1e3));
                w.write_record(&r).map_err(io::Error::from)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

#[derive(serde::Serialize)]
struct ReplayReport {
    words: usize,
    cycles: fbfq_core::sim::CycleStats,
    estimated_ms: f64,
    output: Vec<Vec<f32>>,
}

fn replay(
    path: &Path,
    dims: Option<LayerDims>,
    sim: &SimArgs,
    format: Format,
    out: &mut impl Write,
) -> Result<()> {
    let program = InstructionStream::read_fbfq(path)?;
    let config = sim_config(sim)?;
    let mut s = Simulator::new(config)?;
    s.ingest(program.words())?;
    let values = s.read_output()?;
    let stats = s.cycle_report();
    let rows = match dims {
        Some(d) => rows_of(&assemble(&plan_tiles(d, config.caps)?, d, &values)?),
        None => vec![values],
    };
    match format {
        Format::Text => {
            writeln!(out, "words={}", program.len())?;
            report::cycles_text(out, &stats)?;
            writeln!(
                out,
                "estimated_ms={:.6}",
                stats.seconds(config.clock_mhz) * 1e3
            )?;
            writeln!(out, "output:")?;
            report::write_rows(out, &rows)?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for row in &rows {
                w.write_record(row.iter().map(|v| format!("{v:?}")))
                    .map_err(io::Error::from)?;
            }
            w.flush()?;
        }
        Format::Json => report::json(
            out,
            &ReplayReport {
                words: program.len(),
                cycles: stats,
                estimated_ms: stats.seconds(config.clock_mhz) * 1e3,
                output: rows,
            },
        )?,
    }
    Ok(())
}

fn gen(
    rows: usize,
    cols: usize,
    seed: u64,
    pattern: Pattern,
    variant: Option<Variant>,
    path: &Path,
) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape("rows and cols must be positive".into()));
    }
    let tensor = match (pattern, variant) {
        (Pattern::Ones, Some(v)) => {
            if !cols.is_multiple_of(QK_K) {
                return Err(Error::Shape(format!(
                    "cols = {cols} is not a multiple of {QK_K}"
                )));
            }
            let n = cols / QK_K;
            let row = match v {
                Variant::Q2K => QuantRow::Q2K(vec![q2k_ones(); n]),
                Variant::Q3K => QuantRow::Q3K(vec![q3k_ones(); n]),
                Variant::Q8K => QuantRow::Q8K(vec![q8k_ones(); n]),
            };
            Tensor::Quant(QuantMatrix::new(vec![row; rows])?)
        }
        (_, v) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = match pattern {
                Pattern::Normal => {
                    let dist = Normal::new(0.0f32, 1.0).unwrap();
                    MatrixF32::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
                }
                Pattern::Uniform => {
                    let dist = Uniform::new_inclusive(-1.0f32, 1.0).unwrap();
                    MatrixF32::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
                }
                Pattern::Ones => MatrixF32::from_fn(rows, cols, |_, _| 1.0),
                Pattern::Zeros => MatrixF32::zeros(rows, cols),
            };
            match v {
                None => Tensor::F32(m),
                Some(v) => Tensor::Quant(QuantMatrix::quantize(&m, v)?),
            }
        }
    };
    tensor.write(path)
}
