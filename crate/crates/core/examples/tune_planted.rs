// probe for the gates-vs-low-rank comparison under the Fig-2-style protocol
use finegates::data::PlantedSpec;
use finegates::landscape::{compare_gates_vs_lora, CompareConfig};
use finegates::model::TaskKind;

fn main() {
    let cfg = CompareConfig {
        planted: PlantedSpec {
            d_in: 32, hidden: 256, keep_frac: 0.6, n_samples: 1024, noise: 0.1,
            task: TaskKind::Classification, classes: 3, head_signs: false,
        },
        data_seed: 0,
        epochs: 40,
        batch_size: 16,
        lr_gates: 1e-3,
        lr_bias_head: 1e-3,
        lambda: 0.1,
        target_sparsity: 0.4,
        lora_rank: 4,
    };
    let seeds: Vec<u64> = (0..10).collect();
    let t = compare_gates_vs_lora(&cfg, &seeds).unwrap();
    println!("gates median epochs to 90%: {}", t.gates_median_epochs_to_90);
    println!("lora  median epochs to 90%: {}", t.lora_median_epochs_to_90);
    for s in 0..3 {
        println!("seed {s} gates: {:?}", t.gates[s].iter().step_by(8).map(|v| format!("{v:.2}")).collect::<Vec<_>>());
        println!("seed {s} lora : {:?}", t.lora[s].iter().step_by(8).map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    }
    println!("final gates median: {:.3}", {
        let mut f: Vec<f64> = t.gates.iter().map(|r| *r.last().unwrap()).collect();
        f.sort_by(|a,b| a.partial_cmp(b).unwrap()); f[f.len()/2]
    });
    println!("final lora median: {:.3}", {
        let mut f: Vec<f64> = t.lora.iter().map(|r| *r.last().unwrap()).collect();
        f.sort_by(|a,b| a.partial_cmp(b).unwrap()); f[f.len()/2]
    });
}
