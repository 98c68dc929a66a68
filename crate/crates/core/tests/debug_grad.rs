use prunekit::graph::graph_from_description;
use prunekit::nn::{loss, ModelInstance, WidthPlan};
use prunekit::rng;
use prunekit::Tensor;
use rand::Rng;

#[test]
fn debug_stack_grads() {
    let graph = graph_from_description(
        r#"
input_shape = [2, 8, 8]
num_classes = 3

[[layers]]
id = "conv1"
kind = "conv2d"
out_channels = 4
kernel = [3, 3]
stride = 1
padding = 1

[[layers]]
id = "bn1"
kind = "batchnorm2d"
inputs = ["conv1"]

[[layers]]
id = "gate1"
kind = "channel-gate"
inputs = ["bn1"]

[[layers]]
id = "relu1"
kind = "relu"
inputs = ["gate1"]

[[layers]]
id = "conv2"
kind = "conv2d"
out_channels = 4
kernel = [3, 3]
stride = 1
padding = 1
inputs = ["relu1"]

[[layers]]
id = "bn2"
kind = "batchnorm2d"
inputs = ["conv2"]

[[layers]]
id = "add"
kind = "add-skip"
inputs = ["bn2", "relu1"]

[[layers]]
id = "pool"
kind = "maxpool2d"
kernel = 2
stride = 2
inputs = ["add"]

[[layers]]
id = "gap"
kind = "avgpool-global"
inputs = ["pool"]

[[layers]]
id = "fc"
kind = "linear"
out_channels = 3
inputs = ["gap"]
"#,
    )
    .unwrap();
    let mut model = ModelInstance::<f64>::new_random(&graph, 9);
    model.set_training(true);
    let mut r = rng::stream(3, "test-input");
    let input = Tensor::from_vec(
        &[4, 2, 8, 8],
        (0..4 * 2 * 64).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let mut r = rng::stream(4, "test-labels");
    let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
    let plan = WidthPlan::full(&graph);

    model.zero_grads();
    let trace = model.forward_train(&input, &plan).unwrap();
    let (_, g) = loss::cross_entropy(trace.logits(), &labels).unwrap();
    model.backward(&trace, &g).unwrap();

    let h = 1e-5;
    let mut worst: Vec<(f64, String)> = Vec::new();
    for li in 0..model.layers.len() {
        for pi in 0..model.layers[li].params.len() {
            for ei in 0..model.layers[li].params[pi].value.len() {
                let analytic = model.layers[li].params[pi].grad.data()[ei];
                let orig = model.layers[li].params[pi].value.data()[ei];
                model.layers[li].params[pi].value.data_mut()[ei] = orig + h;
                let t = model.forward_train(&input, &plan).unwrap();
                let (fp, _) = loss::cross_entropy(t.logits(), &labels).unwrap();
                model.layers[li].params[pi].value.data_mut()[ei] = orig - h;
                let t = model.forward_train(&input, &plan).unwrap();
                let (fm, _) = loss::cross_entropy(t.logits(), &labels).unwrap();
                model.layers[li].params[pi].value.data_mut()[ei] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                worst.push((
                    rel,
                    format!(
                        "layer {li} ({}) p{pi} e{ei}: a {analytic:.9} n {numeric:.9}",
                        model.graph.layers[li].id
                    ),
                ));
            }
        }
    }
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (rel, msg) in worst.iter().take(12) {
        eprintln!("rel {rel:.3e}  {msg}");
    }
    panic!("inspect");
}
