import datetime

import typing

from dateutil.parser import parse


def is_generic(klass):
    """ Determine whether klass is a generic class """
    return hasattr(klass, '__origin__')


def is_dict(klass):
    """ Determine whether klass is a Dict """
    return klass.__origin__ == dict


def is_list(klass):
    """ Determine whether klass is a List """
    return klass.__origin__ == list


def _deserialize(data, klass):
    """Deserializes dict, list, str into an object.

    :param data: dict, list or str.
    :param klass: class literal, or string of class name.

    :return: object.
    """
    if data is None:
        return None

    if klass in (int, float, str, bool, bytearray):
        return _deserialize_primitive(data, klass)
    elif klass in (object, typing.Any):
        return data
    elif klass == datetime.date:
        return deserialize_date(data)
    elif klass == datetime.datetime:
        return deserialize_datetime(data)
    elif is_generic(klass):
        if is_list(klass):
            return [_deserialize(sub_data, klass.__args__[0]) for sub_data in data]
        if is_dict(klass):
            return {k: _deserialize(v, klass.__args__[1]) for k, v in data.items()}
        return data
    else:
        return deserialize_model(data, klass)


def _deserialize_primitive(data, klass):
    """Deserializes to primitive type.

    :rtype: int | float | str | bool
    """
    try:
        return klass(data)
    except (TypeError, ValueError):
        return data


def deserialize_date(string):
    if isinstance(string, datetime.date):
        return string
    return parse(string).date()


def deserialize_datetime(string):
    """Deserializes an ISO 8601 string (or anything dateutil understands) to datetime.

    :rtype: datetime
    """
    if isinstance(string, datetime.datetime):
        return string
    return parse(string)


def deserialize_model(data, klass):
    """Deserializes a dict keyed by json names to a model.

    :param data: dict.
    :param klass: class literal.
    :return: model object.
    """
    instance = klass()

    if not instance.swagger_types:
        return data

    for attr, attr_type in instance.swagger_types.items():
        if isinstance(data, dict) and instance.attribute_map[attr] in data:
            value = data[instance.attribute_map[attr]]
            setattr(instance, attr, _deserialize(value, attr_type))

    return instance
