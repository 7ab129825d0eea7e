"""
Forms for XTransferCDR configuration.

Each section of a run configuration (and the synthetic generation flags)
is validated by a plain Django form. ``validate_section`` fills in the
declared initial values for missing keys, rejects keys the form does not
declare, and turns form errors into ConfigurationError.
"""
import copy
from typing import Any, Dict, Optional, Type

from django import forms
from django.core.exceptions import ValidationError
from django.utils.translation import gettext_lazy as _

from .exceptions import ConfigurationError

DEFAULT_ENCODER_HIDDEN = [1024, 512, 256]
DEFAULT_SPLIT_RATIOS = [0.8, 0.1, 0.1]
LOSS_TERMS = ('sim', 'orth', 'reco1', 'reco2', 'cross')


def _positive_int_list(value, name: str, allow_empty: bool = True):
    if not isinstance(value, list):
        raise ValidationError(_('%(name)s must be a list.'), params={'name': name})
    if not allow_empty and not value:
        raise ValidationError(_('%(name)s must not be empty.'), params={'name': name})
    for item in value:
        if isinstance(item, bool) or not isinstance(item, int) or item < 1:
            raise ValidationError(_('%(name)s must contain positive integers.'), params={'name': name})
    return value


class LossWeightsForm(forms.Form):
    """Non-negative weights of the five loss terms."""
    sim = forms.FloatField(initial=1.0, min_value=0.0)
    orth = forms.FloatField(initial=1.0, min_value=0.0)
    reco1 = forms.FloatField(initial=1.0, min_value=0.0)
    reco2 = forms.FloatField(initial=1.0, min_value=0.0)
    cross = forms.FloatField(initial=1.0, min_value=0.0)


class ModelConfigForm(forms.Form):
    """
    Model architecture and optimization settings.

    ``gene_dim`` may be left empty in a run configuration; the training
    command fills it from the dataset header.
    """
    gene_dim = forms.IntegerField(required=False, min_value=1)
    encoder_hidden = forms.JSONField(required=False, initial=DEFAULT_ENCODER_HIDDEN)
    latent_dim = forms.IntegerField(initial=128, min_value=1)
    dropout_rate = forms.FloatField(initial=0.2, min_value=0.0)
    loss_weights = forms.JSONField(required=False, initial=dict)
    lr = forms.FloatField(initial=2e-4)
    epochs = forms.IntegerField(initial=60, min_value=1)
    batch_size = forms.IntegerField(initial=128, min_value=2)
    seed = forms.IntegerField(initial=0, min_value=0)

    def clean_encoder_hidden(self):
        hidden = self.cleaned_data.get('encoder_hidden')
        return _positive_int_list([] if hidden is None else hidden, 'encoder_hidden')

    def clean_dropout_rate(self):
        rate = self.cleaned_data.get('dropout_rate')
        if rate is not None and rate >= 1.0:
            raise ValidationError(_('dropout_rate must be below 1.'))
        return rate

    def clean_lr(self):
        lr = self.cleaned_data.get('lr')
        if lr is not None and lr <= 0:
            raise ValidationError(_('lr must be positive.'))
        return lr

    def clean_loss_weights(self):
        weights = self.cleaned_data.get('loss_weights') or {}
        if not isinstance(weights, dict):
            raise ValidationError(_('loss_weights must be an object.'))
        try:
            return validate_section(LossWeightsForm, weights, 'loss_weights')
        except ConfigurationError as e:
            raise ValidationError(str(e))


class SplitConfigForm(forms.Form):
    """Drug-level split settings."""
    mode = forms.ChoiceField(choices=[('ratio', 'ratio'), ('holdout', 'holdout')], initial='ratio')
    ratios = forms.JSONField(initial=DEFAULT_SPLIT_RATIOS)
    test_perturbations = forms.JSONField(required=False, initial=list)
    val_fraction = forms.FloatField(initial=0.2, min_value=0.0)

    def clean_ratios(self):
        ratios = self.cleaned_data.get('ratios')
        if (not isinstance(ratios, list) or len(ratios) != 3
                or not all(isinstance(r, (int, float)) and not isinstance(r, bool) for r in ratios)):
            raise ValidationError(_('ratios must be a list of three numbers.'))
        return [float(r) for r in ratios]

    def clean_test_perturbations(self):
        names = self.cleaned_data.get('test_perturbations') or []
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise ValidationError(_('test_perturbations must be a list of names.'))
        return names

    def clean_val_fraction(self):
        fraction = self.cleaned_data.get('val_fraction')
        if fraction is not None and fraction >= 1.0:
            raise ValidationError(_('val_fraction must be below 1.'))
        return fraction

    def clean(self):
        cleaned_data = super().clean()
        if cleaned_data.get('mode') == 'holdout' and not cleaned_data.get('test_perturbations'):
            raise ValidationError(_('holdout mode needs test_perturbations.'))
        return cleaned_data


class DataConfigForm(forms.Form):
    """Dataset location and ingestion options."""
    dataset_path = forms.CharField()
    split = forms.JSONField(required=False, initial=dict)
    dose_filter = forms.FloatField(required=False)
    log1p = forms.BooleanField(required=False, initial=False)

    def clean_split(self):
        split = self.cleaned_data.get('split') or {}
        if not isinstance(split, dict):
            raise ValidationError(_('split must be an object.'))
        try:
            return validate_section(SplitConfigForm, split, 'split')
        except ConfigurationError as e:
            raise ValidationError(str(e))


class TrainConfigForm(forms.Form):
    """Training-run bookkeeping."""
    seed = forms.IntegerField(initial=0, min_value=0)
    checkpoint_dir = forms.CharField(required=False)


class EvalConfigForm(forms.Form):
    """DEG selection settings for evaluation."""
    k = forms.IntegerField(initial=50, min_value=1)
    threshold = forms.FloatField(initial=1.0, min_value=0.0)
    epsilon = forms.FloatField(initial=1e-6)
    log1p_data = forms.BooleanField(required=False, initial=False)

    def clean_epsilon(self):
        epsilon = self.cleaned_data.get('epsilon')
        if epsilon is not None and epsilon <= 0:
            raise ValidationError(_('epsilon must be positive.'))
        return epsilon


class SynthConfigForm(forms.Form):
    """Flags of the synthetic dataset generator."""
    genes = forms.IntegerField(initial=200, min_value=1)
    latent = forms.IntegerField(initial=16, min_value=1)
    perts = forms.IntegerField(initial=24, min_value=4, error_messages={
        'min_value': _('At least 4 perturbations are required.'),
    })
    cell_lines = forms.IntegerField(initial=2, min_value=1)
    cells = forms.IntegerField(initial=40, min_value=1)
    noise = forms.FloatField(initial=0.05, min_value=0.0)
    nonlinearity = forms.ChoiceField(
        choices=[('identity', 'identity'), ('softplus', 'softplus')], initial='softplus',
    )
    seed = forms.IntegerField(initial=0, min_value=0)

    def clean(self):
        cleaned_data = super().clean()
        genes = cleaned_data.get('genes')
        latent = cleaned_data.get('latent')
        if genes is not None and latent is not None and genes < latent:
            raise ValidationError(_('genes must be at least latent.'))
        return cleaned_data


def _initial_value(field: forms.Field) -> Any:
    initial = field.initial
    return initial() if callable(initial) else copy.deepcopy(initial)


def validate_section(form_class: Type[forms.Form], data: Optional[Dict[str, Any]],
                     section: str) -> Dict[str, Any]:
    """
    Validate one configuration section.

    Args:
        form_class: Form declaring the section's fields
        data: Raw values (may be None or partial)
        section: Section name used in error messages

    Returns:
        dict: Cleaned values with every declared field present

    Raises:
        ConfigurationError: On unknown keys or invalid values
    """
    data = dict(data or {})
    unknown = sorted(set(data) - set(form_class.base_fields))
    if unknown:
        raise ConfigurationError(f"{section}: unknown keys {', '.join(unknown)}")
    for name, field in form_class.base_fields.items():
        if name not in data:
            data[name] = _initial_value(field)
    form = form_class(data=data)
    if not form.is_valid():
        problems = []
        for name, errors in form.errors.items():
            label = section if name == '__all__' else f'{section}.{name}'
            problems.append(f"{label}: {' '.join(str(e) for e in errors)}")
        raise ConfigurationError('; '.join(problems))
    return dict(form.cleaned_data)
