"""
    Test model_io
    functions:
        TransformerSpec - YES
        forward - YES
        build_graph / expected_node_count - YES
        gen_synthetic / zero_block_model - YES
        save_model / load_model - YES
        save_embedding / load_embedding - YES

    python -m unittest test/test_ModelIO.py

"""


import json
import os
import tempfile
import unittest
from parameterized import parameterized
import numpy as np

from boundcraft.graph import run_forward
from boundcraft.model_io import (
    TransformerSpec,
    build_graph,
    expected_node_count,
    forward,
    gen_synthetic,
    load_embedding,
    load_model,
    save_embedding,
    save_model,
    zero_block_model,
)
from boundcraft.primitives import Activation
from boundcraft.utils import ModelLoadError, ShapeMismatchError


def tiny(**kwargs) -> TransformerSpec:
    params = dict(num_layers=1, num_heads=2, embed_dim=4, length=3, num_classes=3)
    params.update(kwargs)
    return TransformerSpec(**params)


class TestTransformerSpec(unittest.TestCase):
    """
        test TransformerSpec
    """

    test_parameters_arr = [
        (1, 4, 2, 2),
        (2, 8, 16, 5),
        (6, 12, 12, 2),
    ]

    @parameterized.expand(test_parameters_arr)
    def test_parameters(self, layers, E, F, C):
        spec = TransformerSpec(num_layers=layers, num_heads=2, embed_dim=E, ffn_dim=F, num_classes=C)
        total = sum(int(np.prod(shape)) for shape in spec.weight_shapes().values())
        self.assertEqual(spec.count_parameters(), total)

    def test_defaults(self):
        spec = TransformerSpec()
        self.assertEqual(spec.ffn_dim, spec.embed_dim)
        self.assertEqual(spec.head_dim, 32)
        self.assertEqual(spec.input_shape, (1, 16, 128))
        self.assertEqual(spec.perturbation_dim, 16 * 128)

    @parameterized.expand([
        (dict(num_layers=0),),
        (dict(num_layers=7),),
        (dict(num_heads=3),),
        (dict(num_classes=1),),
        (dict(length=0),),
    ])
    def test_invalid(self, kwargs):
        with self.assertRaises(AssertionError):
            tiny(**kwargs)

    def test_set_weights(self):
        model, _, _ = gen_synthetic(0, tiny())
        weights = dict(model.weights)
        del weights["classifier.bias"]
        with self.assertRaises(ShapeMismatchError):
            tiny(weights=weights)
        weights["classifier.bias"] = np.zeros(4)
        with self.assertRaises(ShapeMismatchError):
            tiny(weights=weights)
        weights["classifier.bias"] = np.zeros(3)
        self.assertFalse(tiny(weights=weights)["classifier.bias"].flags.writeable)


class TestForward(unittest.TestCase):
    """
        test forward and build_graph
    """

    def test_single_and_batch(self):
        model, x, labels = gen_synthetic(1, tiny(batch_size=3))
        logits = forward(model, x)
        self.assertEqual(logits.shape, (3, 3))
        np.testing.assert_allclose(forward(model, x[1]), logits[1], rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(labels, np.argmax(logits, axis=-1))
        with self.assertRaises(ShapeMismatchError):
            forward(model, x[:, :2])

    def test_zero_blocks_linear(self):
        rng = np.random.default_rng(0)
        W, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
        model = zero_block_model(tiny(), W, b)
        x = rng.standard_normal((3, 4))
        np.testing.assert_allclose(forward(model, x), W @ x.mean(axis=0) + b, rtol=1e-12)

    @parameterized.expand([(a,) for a in Activation])
    def test_graph_matches_forward(self, activation):
        model, x, _ = gen_synthetic(2, tiny(num_layers=2, batch_size=2, activation=activation))
        for split in (True, False):
            g = build_graph(model, split_projections=split)
            self.assertEqual(len(g.nodes), expected_node_count(2, split))
            np.testing.assert_allclose(run_forward(g, {"x": x}), forward(model, x), rtol=1e-9, atol=1e-12)

    @parameterized.expand([(1, True, 45), (1, False, 24), (2, True, 84), (6, False, 129)])
    def test_node_count(self, layers, split, expected):
        self.assertEqual(expected_node_count(layers, split), expected)

    def test_synthetic_seeded(self):
        a, xa, _ = gen_synthetic(5, tiny())
        b, xb, _ = gen_synthetic(5, tiny())
        c, _, _ = gen_synthetic(6, tiny())
        np.testing.assert_array_equal(xa, xb)
        for name in a.weights:
            np.testing.assert_array_equal(a[name], b[name])
        self.assertFalse(np.array_equal(a["classifier.weight"], c["classifier.weight"]))
        self.assertTrue(np.all(np.abs(xa) <= 1.0))


class TestFiles(unittest.TestCase):
    """
        test model and embedding files
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name
        self.model, self.x, self.labels = gen_synthetic(3, tiny(activation=Activation.TANH))

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    @parameterized.expand([(False,), (True,)])
    def test_model_round_trip(self, inline):
        save_model(self.model, self.path("m.json"), inline=inline)
        self.assertEqual(os.path.exists(self.path("m.bin")), not inline)
        loaded = load_model(self.path("m.json"))
        self.assertEqual(loaded.config(), self.model.config())
        for name in self.model.weights:
            np.testing.assert_array_equal(loaded[name], self.model[name])
        np.testing.assert_array_equal(forward(loaded, self.x), forward(self.model, self.x))

    def test_embedding_round_trip(self):
        save_embedding(self.x[0], self.path("x.json"), label=int(self.labels[0]))
        x, label = load_embedding(self.path("x.json"))
        np.testing.assert_array_equal(x, self.x[0])
        self.assertEqual(label, int(self.labels[0]))
        save_embedding(self.x[0], self.path("y.json"), inline=True)
        x, label = load_embedding(self.path("y.json"))
        np.testing.assert_array_equal(x, self.x[0])
        self.assertIsNone(label)

    def edit_manifest(self, edit):
        save_model(self.model, self.path("m.json"))
        with open(self.path("m.json"), "r") as stream:
            record = json.load(stream)
        edit(record)
        with open(self.path("m.json"), "w") as stream:
            json.dump(record, stream)
        return self.path("m.json")

    def test_missing_file(self):
        with self.assertRaises(ModelLoadError):
            load_model(self.path("absent.json"))

    def test_not_json(self):
        with open(self.path("m.json"), "w") as stream:
            stream.write("{not json")
        with self.assertRaises(ModelLoadError):
            load_model(self.path("m.json"))

    def test_bad_format(self):
        path = self.edit_manifest(lambda r: r.update(format="other/v1"))
        with self.assertRaises(ModelLoadError):
            load_model(path)

    def test_bad_config(self):
        path = self.edit_manifest(lambda r: r["config"].update(num_heads=3))
        with self.assertRaises(ModelLoadError):
            load_model(path)

    def test_missing_blob(self):
        save_model(self.model, self.path("m.json"))
        os.remove(self.path("m.bin"))
        with self.assertRaises(ModelLoadError):
            load_model(self.path("m.json"))

    def test_truncated_blob(self):
        save_model(self.model, self.path("m.json"))
        with open(self.path("m.bin"), "rb") as stream:
            data = stream.read()
        with open(self.path("m.bin"), "wb") as stream:
            stream.write(data[:-8])
        with self.assertRaises(ModelLoadError):
            load_model(self.path("m.json"))

    def test_wrong_shape(self):
        def edit(record):
            entry = record["tensors"][0]
            entry["shape"] = [entry["shape"][0] * entry["shape"][1]]

        with self.assertRaises(ModelLoadError):
            load_model(self.edit_manifest(edit))

    def test_missing_tensor(self):
        path = self.edit_manifest(lambda r: r["tensors"].pop())
        with self.assertRaises(ModelLoadError):
            load_model(path)

    test_malformed_entry_arr = [("name",), ("shape",), ("offset",), ("count",)]

    @parameterized.expand(test_malformed_entry_arr)
    def test_malformed_entry(self, key):
        path = self.edit_manifest(lambda r: r["tensors"][1].pop(key))
        with self.assertRaises(ModelLoadError):
            load_model(path)

    def test_malformed_embedding(self):
        save_embedding(self.x[0], self.path("x.json"))
        with open(self.path("x.json"), "r") as stream:
            record = json.load(stream)
        for tensors in ([], [{"shape": [2, 2], "offset": 0}]):
            record["tensors"] = tensors
            with open(self.path("x.json"), "w") as stream:
                json.dump(record, stream)
            with self.assertRaises(ModelLoadError):
                load_embedding(self.path("x.json"))

    def test_non_finite(self):
        save_model(self.model, self.path("m.json"), inline=True)
        with open(self.path("m.json"), "r") as stream:
            record = json.load(stream)
        record["tensors"][0]["data"][0] = float("nan")
        with open(self.path("m.json"), "w") as stream:
            json.dump(record, stream)
        with self.assertRaises(ModelLoadError):
            load_model(self.path("m.json"))

    def test_embedding_bad_format(self):
        save_embedding(self.x[0], self.path("x.json"), inline=True)
        with open(self.path("x.json"), "r") as stream:
            record = json.load(stream)
        record["format"] = "boundcraft-model/v1"
        with open(self.path("x.json"), "w") as stream:
            json.dump(record, stream)
        with self.assertRaises(ModelLoadError):
            load_embedding(self.path("x.json"))


if __name__ == "__main__":
    unittest.main()
