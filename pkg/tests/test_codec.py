import os
import subprocess
import sys

import numpy as np
import pytest

from taxocodec.codec import (HEADER, MAGIC, Bitstream, CodecConfig, CodecModel, compress, decompress,
                             decompress_latent, load_model, measure, save_model)
from taxocodec.errors import (ArtifactNotFoundError, CodebookMismatchError, DecodeError, NonFiniteError,
                              ShapeMismatchError, UnsupportedVersionError)
from taxocodec.numerics import Parameter, Tensor, grad_check

SMALL = dict(in_channels=3, in_height=8, in_width=8, latent_channels=4, hidden_channels=8,
             hyper_dim=4, tau=3, n_priors=4, codebook_size=4)


def _model(**overrides):
    return CodecModel(CodecConfig(**{**SMALL, **overrides}))


def _feature(seed=0, shape=(3, 8, 8), scale=3.0):
    return (scale * np.random.default_rng(seed).standard_normal(shape)).astype(np.float32)


class TestConfig:

    def test_latent_shape(self):
        assert CodecConfig(**SMALL).latent_shape == (4, 2, 2)
        assert CodecConfig(**{**SMALL, "in_height": 9, "in_width": 5}).latent_shape == (4, 3, 2)

    def test_vector_shape(self):
        cfg = CodecConfig(**{**SMALL, "in_height": 0, "in_width": 0})
        assert cfg.is_vector
        assert cfg.latent_shape == (4,)

    def test_half_vector_is_rejected(self):
        with pytest.raises(ValueError):
            CodecConfig(**{**SMALL, "in_height": 0})

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            CodecConfig(**SMALL, colour="blue")


class TestRoundTrip:

    def test_decoder_sees_encoder_latent(self):
        model = _model()
        h = _feature()
        bs = compress(model, h)
        z, v = decompress_latent(model, Bitstream.from_bytes(bs.to_bytes()))
        z_ref, v_ref = model.analyze(Tensor(h[None]))
        assert np.array_equal(z.symbols, z_ref.symbols[0])
        assert np.array_equal(v, v_ref[0])

    def test_reconstruction_matches_eval_pass(self):
        model = _model()
        h = _feature(1)
        h_hat, _, _ = model.forward_eval(Tensor(h[None]))
        np.testing.assert_array_equal(decompress(model, compress(model, h)), h_hat.data[0])

    def test_vector_features(self):
        model = _model(in_channels=6, in_height=0, in_width=0)
        h = _feature(2, shape=(6,))
        bs = Bitstream.from_bytes(compress(model, h).to_bytes())
        assert (bs.height, bs.width) == (0, 0)
        assert decompress(model, bs).shape == (6,)

    def test_header_layout(self):
        model = _model()
        data = compress(model, _feature()).to_bytes()
        assert data[:4] == MAGIC
        fields = HEADER.unpack_from(data)
        assert fields[1:5] == (1, 4, 2, 2)
        assert fields[5:8] == (4, -64, 63)
        assert fields[8] == model.codebook_hash()
        assert len(data) == HEADER.size + fields[10] + fields[11]

    def test_compression_is_deterministic(self):
        model = _model()
        h = _feature(3)
        assert compress(model, h).to_bytes() == compress(_model(), h).to_bytes()


class TestTrainingGradients:

    def test_full_training_pass(self):
        model = _model(seed=2).astype(np.float64)
        h = Parameter(np.random.default_rng(7).standard_normal((1, 3, 8, 8)))

        def f():
            out = model.forward_train(h, np.random.default_rng(11))
            diff = out.h_hat - h
            return out.bits * (1.0 / 64) + (diff * diff).mean()

        params = [h, model.encoder.parameters()[-1], model.hyper_analysis.parameters()[-2],
                  model.coefficients.parameters()[-1], model.codebook.bases, model.head.parameters()[-1],
                  model.hyper_scales, model.decoder.parameters()[-1]]
        report = grad_check(f, params, eps=1e-6, atol=1e-4)
        assert report.passed, report


class TestRates:

    def test_coder_is_close_to_estimate(self):
        model = _model()
        for seed in range(5):
            record, _ = measure(model, _feature(seed))
            assert record.payload_bits <= 1.01 * record.bits_estimated + 64
            assert record.bits_actual == record.payload_bits + 8 * HEADER.size

    def test_bpp_uses_source_resolution(self):
        model = _model(source_h=32, source_w=16)
        record, bs = measure(model, _feature())
        assert record.bpp == pytest.approx(bs.total_bits / 512)

    def test_constant_input_codes_cheaply(self):
        model = _model()
        flat = measure(model, np.zeros((3, 8, 8), np.float32))[0]
        noisy = measure(model, _feature(scale=50.0))[0]
        assert flat.bits_estimated <= noisy.bits_estimated


class TestErrors:

    def test_wrong_feature_shape(self):
        with pytest.raises(ShapeMismatchError):
            compress(_model(), np.zeros((3, 9, 8), np.float32))

    def test_non_finite_feature(self):
        h = _feature()
        h[0, 0, 0] = np.inf
        with pytest.raises(NonFiniteError):
            compress(_model(), h)

    def test_codebook_mismatch(self):
        bs = compress(_model(seed=0), _feature())
        with pytest.raises(CodebookMismatchError):
            decompress(_model(seed=1), bs)

    def test_bad_magic(self):
        data = bytearray(compress(_model(), _feature()).to_bytes())
        data[0:4] = b"XXXX"
        with pytest.raises(DecodeError):
            Bitstream.from_bytes(bytes(data))

    def test_unsupported_version(self):
        data = bytearray(compress(_model(), _feature()).to_bytes())
        data[4] = 9
        with pytest.raises(UnsupportedVersionError):
            Bitstream.from_bytes(bytes(data))

    @pytest.mark.parametrize("cut", [1, 3, 20])
    def test_truncation(self, cut):
        data = compress(_model(), _feature()).to_bytes()
        with pytest.raises(DecodeError):
            Bitstream.from_bytes(data[:-cut])

    def test_truncated_segment_inside_valid_header(self):
        model = _model()
        bs = compress(model, _feature())
        short = Bitstream(**{**bs.__dict__, "z_segment": bs.z_segment[:-2]})
        with pytest.raises(DecodeError):
            decompress(model, short)

    def test_trailing_bytes(self):
        data = compress(_model(), _feature()).to_bytes()
        with pytest.raises(DecodeError):
            Bitstream.from_bytes(data + b"\x00")

    def test_latent_shape_mismatch(self):
        bs = compress(_model(), _feature())
        other = _model(in_channels=3, in_height=16, in_width=16)
        other_bs = Bitstream(**{**bs.__dict__, "codebook_hash": other.codebook_hash()})
        with pytest.raises(ShapeMismatchError):
            decompress(other, other_bs)

    def test_hyper_symbol_count_mismatch(self):
        model = _model()
        bs = compress(model, _feature())
        odd = Bitstream(**{**bs.__dict__, "v_symbol_count": bs.v_symbol_count + 1})
        with pytest.raises(DecodeError) as info:
            decompress(model, odd)
        assert info.value.detail.endswith(f"expected {model.config.hyper_dim}")
        assert f"carries {model.config.hyper_dim + 1} hyper symbols" in info.value.detail


class TestCheckpoint:

    def test_round_trip(self, tmp_path):
        model = _model(seed=4)
        path = str(tmp_path / "codec.joblib")
        save_model(model, path)
        loaded = load_model(path)
        h = _feature()
        assert compress(loaded, h).to_bytes() == compress(model, h).to_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactNotFoundError) as info:
            load_model(str(tmp_path / "nope.joblib"))
        assert info.value.code == "MODEL_NOT_FOUND"

    @pytest.mark.slow
    def test_two_process_determinism(self, tmp_path):
        model = _model(seed=5)
        model_path = str(tmp_path / "codec.joblib")
        save_model(model, model_path)
        h = _feature(7)
        np.save(tmp_path / "h.npy", h)
        script = (
            "import sys, numpy as np\n"
            "from taxocodec.codec import Bitstream, compress, decompress, load_model\n"
            "m = load_model(sys.argv[1])\n"
            "if sys.argv[2] == 'encode':\n"
            "    open(sys.argv[3], 'wb').write(compress(m, np.load(sys.argv[4])).to_bytes())\n"
            "else:\n"
            "    np.save(sys.argv[4], decompress(m, Bitstream.from_bytes(open(sys.argv[3], 'rb').read())))\n"
        )
        root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        env = {**os.environ, "PYTHONPATH": root}
        txc, out = str(tmp_path / "h.txc"), str(tmp_path / "h_hat.npy")
        subprocess.run([sys.executable, "-c", script, model_path, "encode", txc, str(tmp_path / "h.npy")],
                       check=True, env=env)
        subprocess.run([sys.executable, "-c", script, model_path, "decode", txc, out], check=True, env=env)
        assert open(txc, "rb").read() == compress(model, h).to_bytes()
        np.testing.assert_array_equal(np.load(out), decompress(model, compress(model, h)))
