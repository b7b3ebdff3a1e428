use shadowdef_core::data::{generate_synthetic_dataset, partition_clients, split_off, PartitionSpec};
use shadowdef_core::fl::{run_federated, ClientTrainer, FlConfig, LocalTrainConfig, PlainTrainer};
use shadowdef_core::models::task::{TaskArch, TaskModel};

#[test]
fn undefended_training_learns_the_synthetic_task() {
    let spec = PartitionSpec::default();
    let all = generate_synthetic_dataset(spec.total() + 64, 16, 1, 2, 0).unwrap();
    let (pool, test) = split_off(all, spec.total(), 0, 1);
    let clients = partition_clients(&pool, &spec, 0).unwrap();
    let mut trainers: Vec<Box<dyn ClientTrainer>> = clients.iter().map(|_| Box::new(PlainTrainer) as _).collect();
    let cfg = FlConfig {
        rounds: 30,
        train: LocalTrainConfig { lr: 0.05, local_rounds: 1 },
        seed: 0,
    };
    let model = TaskModel::new(TaskArch::new(1, 16, 2), 0).unwrap();
    let (_, trace) = run_federated(&cfg, model, &clients, &mut trainers, &test, |_| Ok(())).unwrap();
    let last = trace.final_record().unwrap();
    assert_eq!(last.round, 30);
    assert!(last.accuracy >= 0.9, "accuracy {}", last.accuracy);
}
